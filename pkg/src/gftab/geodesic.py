"""Grassmann subspaces, principal angles and the geodesic flow kernel.

All routines are plain numpy on float64. The kernel matrix is treated as a
constant by the trainer: no derivative flows through the SVDs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
NORM_FLOOR = 1e-12


class DegenerateSubspace(ValueError):
    """Batch representations do not span ``D`` dimensions."""


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    Q: np.ndarray  # d_lin x D, orthonormal columns
    R: np.ndarray  # d_lin x (d_lin - D), orthogonal complement

    @property
    def dim(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True, eq=False)
class PrincipalAngleDecomp:
    U1: np.ndarray  # D x D
    U2: np.ndarray  # (d_lin - D) x D
    V: np.ndarray  # D x D
    theta: np.ndarray  # ascending, in [0, pi/2]


@dataclass(frozen=True, eq=False)
class GfkMatrix:
    A: np.ndarray
    theta: np.ndarray


def _fix_signs(M: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(M), axis=0)
    signs = np.sign(M[idx, np.arange(M.shape[1])])
    signs[signs == 0] = 1.0
    return M * signs


def check_orthonormal(Q: np.ndarray, tol: float = 1e-8) -> None:
    err = np.max(np.abs(Q.T @ Q - np.eye(Q.shape[1]))) if Q.size else 0.0
    if err > tol:
        raise ValueError(f"basis is not orthonormal (max deviation {err:.2e})")


def batch_subspace(Z: np.ndarray, D: int) -> SubspaceBasis:
    """Top-``D`` right singular subspace of an (uncentered) batch ``B x d_lin``."""
    Z = np.asarray(Z, dtype=np.float64)
    B, d = Z.shape
    if B < D:
        raise DegenerateSubspace(f"batch of {B} rows cannot span {D} dimensions")
    if d < 2 * D:
        raise ValueError(f"d_lin={d} must be at least 2*D={2 * D}")
    if not np.isfinite(Z).all():
        raise DegenerateSubspace("non-finite representations")
    # left factor of Z^T: full orthogonal d x d basis, leading D columns = row space
    U, s, _ = np.linalg.svd(Z.T, full_matrices=True)
    if s[0] == 0 or s[D - 1] <= 1e-10 * s[0]:
        raise DegenerateSubspace(f"batch rank below D={D} (sigma_D/sigma_1 = {s[D - 1] / max(s[0], 1e-300):.2e})")
    Q = _fix_signs(U[:, :D])
    R = _fix_signs(U[:, D:])
    return SubspaceBasis(Q=Q, R=R)


def principal_angles(P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(P1.T @ P2, compute_uv=False)
    return np.sort(np.arccos(np.clip(s, 0.0, 1.0)))


def gsvd_pair(P_hard: np.ndarray, R_hard: np.ndarray, P_soft: np.ndarray) -> PrincipalAngleDecomp:
    """Paired decomposition of ``P_hard^T P_soft`` and ``R_hard^T P_soft``.

    ``P_hard^T P_soft = U1 diag(cos) V^T`` and
    ``R_hard^T P_soft = -U2 diag(sin) V^T``. The minus sign makes
    ``P_hard U1 cos(t) - R_hard U2 sin(t)`` reach span(P_soft) at t=1.
    """
    for M in (P_hard, R_hard, P_soft):
        check_orthonormal(M)
    d, D = P_hard.shape
    if R_hard.shape != (d, d - D) or P_soft.shape != (d, D):
        raise ValueError("incompatible basis shapes")
    if d < 2 * D:
        raise ValueError(f"d_lin={d} must be at least 2*D={2 * D}")
    U1, c, Vt = np.linalg.svd(P_hard.T @ P_soft)
    V = Vt.T
    c = np.clip(c, 0.0, 1.0)
    # svd returns descending cosines, i.e. ascending angles
    theta = np.arccos(c)
    sin = np.sin(theta)
    W = -(R_hard.T @ P_soft @ V)  # = U2 diag(sin)
    U2 = np.zeros((d - D, D))
    good = sin > 1e-8
    U2[:, good] = W[:, good] / sin[good]
    if not good.all():
        U2 = _complete_columns(U2, good)
    return PrincipalAngleDecomp(U1=U1, U2=U2, V=V, theta=theta)


def _complete_columns(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Fill columns flagged bad with unit vectors orthogonal to all others (Gram-Schmidt)."""
    U = U.copy()
    n = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(good)]
    candidates = iter(np.eye(n))
    for j in np.flatnonzero(~good):
        for e in candidates:
            v = e.copy()
            for b in basis:
                v -= (b @ v) * b
            for b in basis:
                v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                v /= nv
                U[:, j] = v
                basis.append(v)
                break
    return U


def geodesic_flow(decomp: PrincipalAngleDecomp, P_hard: np.ndarray, R_hard: np.ndarray, t: float) -> np.ndarray:
    """Point ``t`` in [0, 1] on the geodesic from span(P_hard) to span(P_soft)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("flow parameter must lie in [0, 1]")
    th = decomp.theta
    return P_hard @ decomp.U1 * np.cos(t * th) - R_hard @ decomp.U2 * np.sin(t * th)


def kernel_diagonals(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form blocks; the small-angle limits are (2, 0, 0)."""
    theta = np.asarray(theta, dtype=np.float64)
    small = theta < SMALL_ANGLE
    t2 = np.where(small, 1.0, 2.0 * theta)
    sinc = np.sin(t2) / t2
    d1 = np.where(small, 2.0, 1.0 + sinc)
    e2 = np.where(small, 0.0, (np.cos(t2) - 1.0) / t2)
    g3 = np.where(small, 0.0, 1.0 - sinc)
    return d1, e2, g3


def gfk_matrix(decomp: PrincipalAngleDecomp, P_hard: np.ndarray, R_hard: np.ndarray) -> GfkMatrix:
    """Closed-form kernel; equals twice the flow integral of ``GF GF^T``."""
    d1, e2, g3 = kernel_diagonals(decomp.theta)
    left = P_hard @ decomp.U1
    right = R_hard @ decomp.U2
    A = (left * d1) @ left.T + (left * e2) @ right.T + (right * e2) @ left.T + (right * g3) @ right.T
    A = 0.5 * (A + A.T)
    return GfkMatrix(A=A, theta=decomp.theta)


def quadrature_oracle(decomp: PrincipalAngleDecomp, P_hard: np.ndarray, R_hard: np.ndarray, steps: int = 1000) -> np.ndarray:
    """Trapezoid rule for the integral of ``GF(t) GF(t)^T`` over t in [0, 1]."""
    if steps < 2:
        raise ValueError("need at least 2 quadrature steps")
    ts = np.linspace(0.0, 1.0, steps + 1)
    w = np.full(steps + 1, 1.0 / steps)
    w[0] = w[-1] = 0.5 / steps
    d = P_hard.shape[0]
    out = np.zeros((d, d))
    for t, wt in zip(ts, w):
        G = geodesic_flow(decomp, P_hard, R_hard, float(t))
        out += wt * (G @ G.T)
    return out


def kernel_from_views(Z_soft: np.ndarray, Z_hard: np.ndarray, D: int) -> GfkMatrix:
    hard = batch_subspace(Z_hard, D)
    soft = batch_subspace(Z_soft, D)
    decomp = gsvd_pair(hard.Q, hard.R, soft.Q)
    return gfk_matrix(decomp, hard.Q, hard.R)


def gfk_similarity(z_soft: np.ndarray, z_hard: np.ndarray, A) -> float:
    """Kernel cosine ``z_s^T A z_h / (|z_s|_A |z_h|_A)``; 0 for vanishing norms."""
    A = A.A if isinstance(A, GfkMatrix) else A
    ss = max(float(z_soft @ A @ z_soft), 0.0)
    hh = max(float(z_hard @ A @ z_hard), 0.0)
    ns, nh = np.sqrt(ss), np.sqrt(hh)
    if ns < NORM_FLOOR or nh < NORM_FLOOR:
        return 0.0
    # symmetrized so swapping the arguments is exact in floating point
    sh = 0.5 * (float(z_soft @ A @ z_hard) + float(z_hard @ A @ z_soft))
    return sh / (ns * nh)


def gfk_loss_grad(z_soft: np.ndarray, z_hard: np.ndarray, A) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``1 - gfk_similarity`` with ``A`` held fixed."""
    A = A.A if isinstance(A, GfkMatrix) else A
    As, Ah = A @ z_soft, A @ z_hard
    ss, hh = float(z_soft @ As), float(z_hard @ Ah)
    if ss < NORM_FLOOR**2 or hh < NORM_FLOOR**2:
        return np.zeros_like(z_soft), np.zeros_like(z_hard)
    sh = 0.5 * (float(z_soft @ Ah) + float(z_hard @ As))
    denom = np.sqrt(ss * hh)
    sim = sh / denom
    g_soft = -(Ah / denom - sim * As / ss)
    g_hard = -(As / denom - sim * Ah / hh)
    return g_soft, g_hard
