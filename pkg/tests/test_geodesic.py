from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gftab.geodesic import (
    DegenerateSubspace,
    batch_subspace,
    geodesic_flow,
    gfk_loss_grad,
    gfk_matrix,
    gfk_similarity,
    gsvd_pair,
    kernel_diagonals,
    kernel_from_views,
    principal_angles,
    quadrature_oracle,
)

from .conftest import fd_gradient, rel_err


def random_basis(rng, d, D):
    Q, _ = np.linalg.qr(rng.standard_normal((d, D)))
    return Q


def random_pair(rng, d=32, D=8, B=40):
    hard = batch_subspace(rng.standard_normal((B, d)), D)
    soft = batch_subspace(rng.standard_normal((B, d)), D)
    return hard, soft, gsvd_pair(hard.Q, hard.R, soft.Q)


def projector(Q):
    return Q @ Q.T


# -- batch_subspace --------------------------------------------------------


def test_subspace_single_direction_sign():
    u = np.array([0.6, -0.8, 0.0, 0.0])
    basis = batch_subspace(np.tile(-u, (5, 1)), 1)
    q = basis.Q[:, 0]
    assert np.allclose(np.abs(q), np.abs(u))
    assert q[np.argmax(np.abs(q))] > 0
    assert basis.Q.T @ basis.Q == pytest.approx(1.0)


def test_subspace_standard_basis_rows():
    d, D = 10, 3
    Z = np.tile(np.eye(d)[:D], (4, 1))
    Q = batch_subspace(Z, D).Q
    E = np.eye(d)[:, :D]
    assert np.linalg.norm(projector(Q) - projector(E)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), D=st.integers(1, 6))
def test_subspace_full_orthogonal(seed, D):
    rng = np.random.default_rng(seed)
    d = 2 * D + 3
    b = batch_subspace(rng.standard_normal((D + 5, d)), D)
    M = np.hstack([b.Q, b.R])
    assert np.abs(M.T @ M - np.eye(d)).max() <= 1e-8


def test_subspace_errors():
    with pytest.raises(DegenerateSubspace):
        batch_subspace(np.ones((2, 8)), 3)
    with pytest.raises(DegenerateSubspace):
        batch_subspace(np.tile(np.arange(8.0), (10, 1)), 2)
    with pytest.raises(ValueError):
        batch_subspace(np.random.default_rng(0).standard_normal((10, 5)), 3)


# -- gsvd ------------------------------------------------------------------


def test_gsvd_identical_subspaces():
    rng = np.random.default_rng(1)
    b = batch_subspace(rng.standard_normal((20, 12)), 4)
    dec = gsvd_pair(b.Q, b.R, b.Q)
    assert np.abs(dec.theta).max() <= 1e-7


def test_gsvd_orthogonal_subspaces():
    D = 3
    I = np.eye(2 * D)
    dec = gsvd_pair(I[:, :D], I[:, D:], I[:, D:])
    np.testing.assert_allclose(dec.theta, np.pi / 2, atol=1e-12)


def test_gsvd_planar_rotation():
    a = 0.3
    dec = gsvd_pair(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]), np.array([[np.cos(a)], [np.sin(a)]]))
    assert dec.theta[0] == pytest.approx(a, abs=1e-12)


def test_gsvd_decomposition_identities():
    rng = np.random.default_rng(2)
    for _ in range(10):
        hard, soft, dec = random_pair(rng)
        c, s = np.cos(dec.theta), np.sin(dec.theta)
        np.testing.assert_allclose(c**2 + s**2, 1.0, atol=1e-12)
        M = hard.Q.T @ soft.Q
        assert np.linalg.norm(M - dec.U1 @ np.diag(c) @ dec.V.T) <= 1e-8 * np.linalg.norm(M)
        np.testing.assert_allclose(hard.R.T @ soft.Q @ dec.V, -dec.U2 * s, atol=1e-10)
        assert np.abs(dec.U2.T @ dec.U2 - np.eye(8)).max() <= 1e-8
        assert np.all(np.diff(dec.theta) >= -1e-12)
        assert np.all((dec.theta >= 0) & (dec.theta <= np.pi / 2))


def test_gsvd_partial_overlap_fills_u2():
    # first two directions shared: their sines vanish and U2 is completed
    d, D = 8, 3
    rng = np.random.default_rng(3)
    O, _ = np.linalg.qr(rng.standard_normal((d, d)))
    P_hard = O[:, :3]
    P_soft = np.column_stack([O[:, 0], O[:, 1], O[:, 5]])
    R_hard = O[:, 3:]
    dec = gsvd_pair(P_hard, R_hard, P_soft)
    np.testing.assert_allclose(np.sort(dec.theta), [0, 0, np.pi / 2], atol=1e-7)
    assert np.abs(dec.U2.T @ dec.U2 - np.eye(D)).max() <= 1e-8
    G1 = geodesic_flow(dec, P_hard, R_hard, 1.0)
    assert np.linalg.norm(projector(G1) - projector(P_soft)) <= 1e-8


def test_gsvd_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        gsvd_pair(np.ones((4, 1)), np.eye(4)[:, 1:], np.eye(4)[:, :1])


def test_angles_invariant_to_right_rotation():
    rng = np.random.default_rng(4)
    P1, P2 = random_basis(rng, 16, 5), random_basis(rng, 16, 5)
    O1, O2 = random_basis(rng, 5, 5), random_basis(rng, 5, 5)
    np.testing.assert_allclose(principal_angles(P1, P2), principal_angles(P1 @ O1, P2 @ O2), atol=1e-8)


# -- flow and kernel -------------------------------------------------------


def test_flow_endpoints_and_orthonormal_columns():
    rng = np.random.default_rng(5)
    for _ in range(10):
        hard, soft, dec = random_pair(rng)
        G0 = geodesic_flow(dec, hard.Q, hard.R, 0.0)
        G1 = geodesic_flow(dec, hard.Q, hard.R, 1.0)
        assert np.linalg.norm(projector(G0) - projector(hard.Q)) <= 1e-8
        assert np.linalg.norm(projector(G1) - projector(soft.Q)) <= 1e-8
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            G = geodesic_flow(dec, hard.Q, hard.R, t)
            assert np.abs(G.T @ G - np.eye(8)).max() <= 1e-8


def test_flow_constant_for_identical_subspaces():
    rng = np.random.default_rng(6)
    b = batch_subspace(rng.standard_normal((20, 10)), 3)
    dec = gsvd_pair(b.Q, b.R, b.Q)
    for t in (0.0, 0.3, 1.0):
        assert np.linalg.norm(projector(geodesic_flow(dec, b.Q, b.R, t)) - projector(b.Q)) <= 1e-10


def test_kernel_diagonals_values():
    d1, e2, g3 = kernel_diagonals(np.array([0.0, 1e-9, np.pi / 2]))
    np.testing.assert_array_equal(d1[:2], [2.0, 2.0])
    np.testing.assert_array_equal(e2[:2], [0.0, 0.0])
    np.testing.assert_array_equal(g3[:2], [0.0, 0.0])
    assert d1[2] == pytest.approx(1.0, abs=1e-15)
    assert e2[2] == pytest.approx(-2 / np.pi, abs=1e-15)
    assert e2[2] == pytest.approx(-0.63662, abs=1e-5)
    assert g3[2] == pytest.approx(1.0, abs=1e-15)


def test_kernel_diagonals_continuous_at_threshold():
    d1, e2, g3 = kernel_diagonals(np.array([1e-6 * (1 - 1e-9), 1e-6 * (1 + 1e-9)]))
    np.testing.assert_allclose(d1[0], d1[1], atol=1e-11)
    np.testing.assert_allclose(e2[0], e2[1], atol=1e-5)
    np.testing.assert_allclose(g3[0], g3[1], atol=1e-11)


def test_identical_subspaces_kernel():
    rng = np.random.default_rng(7)
    b = batch_subspace(rng.standard_normal((20, 12)), 4)
    dec = gsvd_pair(b.Q, b.R, b.Q)
    A = gfk_matrix(dec, b.Q, b.R).A
    np.testing.assert_allclose(A, 2 * projector(b.Q), atol=1e-10)
    np.testing.assert_allclose(quadrature_oracle(dec, b.Q, b.R, 50), projector(b.Q), atol=1e-10)


def test_closed_form_equals_twice_quadrature():
    rng = np.random.default_rng(8)
    for _ in range(5):
        hard, soft, dec = random_pair(rng)
        A = gfk_matrix(dec, hard.Q, hard.R).A
        Q = quadrature_oracle(dec, hard.Q, hard.R, 1000)
        assert np.linalg.norm(A - 2 * Q) / np.linalg.norm(A) <= 1e-6


def test_quadrature_second_order_convergence():
    rng = np.random.default_rng(9)
    hard, soft, dec = random_pair(rng, d=12, D=3)
    A = gfk_matrix(dec, hard.Q, hard.R).A / 2
    errs = [np.linalg.norm(quadrature_oracle(dec, hard.Q, hard.R, n) - A) for n in (10, 20, 40)]
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3
    Q = quadrature_oracle(dec, hard.Q, hard.R, 20)
    np.testing.assert_allclose(Q, Q.T, atol=1e-14)
    assert np.linalg.eigvalsh(Q).min() >= -1e-12


def test_kernel_structure_random():
    rng = np.random.default_rng(10)
    for _ in range(20):
        hard, soft, dec = random_pair(rng)
        A = gfk_matrix(dec, hard.Q, hard.R).A
        assert np.abs(A - A.T).max() <= 1e-10
        lam = np.linalg.eigvalsh(A)
        assert lam.min() >= -1e-9 * np.linalg.norm(A, 2)
        sv = np.linalg.svd(A, compute_uv=False)
        assert np.all(sv[16:] <= 1e-8 * sv[0])


def test_kernel_from_views_shape():
    rng = np.random.default_rng(11)
    g = kernel_from_views(rng.standard_normal((30, 20)), rng.standard_normal((30, 20)), 4)
    assert g.A.shape == (20, 20) and g.theta.shape == (4,)


# -- similarity ------------------------------------------------------------


def _kernel(rng, d=16, D=4):
    hard, soft, dec = random_pair(rng, d=d, D=D, B=30)
    return gfk_matrix(dec, hard.Q, hard.R).A


def test_similarity_identities():
    rng = np.random.default_rng(12)
    A = _kernel(rng)
    for _ in range(20):
        zs, zh = rng.standard_normal(16), rng.standard_normal(16)
        assert 1 - gfk_similarity(zs, zs, A) == pytest.approx(0.0, abs=1e-12)
        base = gfk_similarity(zs, zh, A)
        c1, c2, c3 = rng.uniform(0.1, 10, size=3)
        assert gfk_similarity(c1 * zs, c2 * zh, c3 * A) == pytest.approx(base, abs=1e-10)
        assert gfk_similarity(zs, zh, A) == gfk_similarity(zh, zs, A)
        assert -1 - 1e-12 <= base <= 1 + 1e-12


def test_similarity_plain_cosine_inside_span():
    rng = np.random.default_rng(13)
    P = random_basis(rng, 10, 2)
    A = 2 * projector(P)
    phi = np.pi / 3
    zs = P @ np.array([1.0, 0.0])
    zh = P @ np.array([np.cos(phi), np.sin(phi)]) * 3.0
    assert gfk_similarity(zs, zh, A) == pytest.approx(0.5, abs=1e-12)


def test_similarity_orthogonal_to_kernel():
    P = np.eye(6)[:, :2]
    A = 2 * projector(P)
    assert gfk_similarity(np.ones(6), np.eye(6)[5], A) == 0.0


def test_similarity_closed_form_vs_quadrature_kernel():
    rng = np.random.default_rng(14)
    hard, soft, dec = random_pair(rng)
    A = gfk_matrix(dec, hard.Q, hard.R).A
    Q = quadrature_oracle(dec, hard.Q, hard.R, 1000)
    for _ in range(5):
        zs, zh = rng.standard_normal(32), rng.standard_normal(32)
        assert abs(gfk_similarity(zs, zh, A) - gfk_similarity(zs, zh, Q)) <= 1e-6


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(15)
    A = _kernel(rng)
    At = torch.from_numpy(A)
    for _ in range(10):
        zs, zh = rng.standard_normal(16), rng.standard_normal(16)
        gs, gh = gfk_loss_grad(zs, zh, A)
        fs = fd_gradient(lambda z: 1 - gfk_similarity(z.numpy(), zh, At.numpy()), torch.from_numpy(zs.copy()))
        fh = fd_gradient(lambda z: 1 - gfk_similarity(zs, z.numpy(), At.numpy()), torch.from_numpy(zh.copy()))
        assert rel_err(gs, fs) <= 1e-4
        assert rel_err(gh, fh) <= 1e-4


def test_loss_grad_stationary_and_scale():
    rng = np.random.default_rng(16)
    A = _kernel(rng)
    z = rng.standard_normal(16)
    gs, gh = gfk_loss_grad(z, z, A)
    assert np.abs(gs).max() <= 1e-12 and np.abs(gh).max() <= 1e-12
    zs, zh = rng.standard_normal(16), rng.standard_normal(16)
    _, g1 = gfk_loss_grad(zs, zh, A)
    _, g2 = gfk_loss_grad(10 * zs, zh, A)
    np.testing.assert_allclose(g1 / np.linalg.norm(g1), g2 / np.linalg.norm(g2), atol=1e-12)


def test_loss_grad_degenerate_is_zero():
    A = 2 * projector(np.eye(6)[:, :2])
    gs, gh = gfk_loss_grad(np.eye(6)[4], np.ones(6), A)
    assert not gs.any() and not gh.any()
