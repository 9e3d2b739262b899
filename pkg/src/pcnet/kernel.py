"""Dense linear algebra and optimizer primitives.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure: inputs are never modified and a fresh array is returned.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "ConvergenceError",
    "as_matrix",
    "mat_mul",
    "tanh_map",
    "tanh_deriv_map",
    "identity_map",
    "identity_deriv_map",
    "l1_norm",
    "jacobi_svd",
    "singular_values",
    "sgd_step",
    "AdamState",
    "adam_step",
]

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


class ConvergenceError(ArithmeticError):
    """Raised when an iterative kernel exhausts its iteration budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} does not match {b.shape}")


def mat_mul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def tanh_map(x) -> np.ndarray:
    return np.tanh(np.asarray(x, dtype=np.float64))


def tanh_deriv_map(x) -> np.ndarray:
    t = np.tanh(np.asarray(x, dtype=np.float64))
    return 1.0 - t * t


def identity_map(x) -> np.ndarray:
    return np.array(x, dtype=np.float64, copy=True)


def identity_deriv_map(x) -> np.ndarray:
    return np.ones_like(np.asarray(x, dtype=np.float64))


def l1_norm(a) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64)).sum())


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of ``n`` columns into disjoint (p, q) sets, covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        ps, qs = [], []
        for i in range(k // 2):
            p, q = players[i], players[k - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        # keep the first element fixed and rotate the rest
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(a, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(u, s, vt)`` with ``s`` descending and ``a == u @ diag(s) @ vt``.
    Rotations for disjoint column pairs are applied together in round-robin
    order, so each sweep touches every pair exactly once.
    """
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("jacobi_svd requires finite entries")
    transposed = a.shape[1] > a.shape[0]
    work = (a.T if transposed else a).copy()
    q_factor = None
    if work.shape[0] > 2 * work.shape[1]:
        # Tall input: rotate the square R factor instead; it has the same singular values.
        q_factor, work = np.linalg.qr(work)
    m, n = work.shape
    v = np.eye(n)
    if n == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((0, n))

    rounds = _round_robin(n)
    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            residual = max(residual, float(off.max()))
            rotate = off > tol
            if not rotate.any():
                continue
            p, q = p[rotate], q[rotate]
            alpha, beta, gamma = alpha[rotate], beta[rotate], gamma[rotate]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            up, uq = work[:, p], work[:, q]
            work[:, p] = c * up - s * uq
            work[:, q] = s * up + c * uq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if residual <= tol:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual)

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    nz = sigma > 0
    u[:, nz] = work[:, nz] / sigma[nz]
    if q_factor is not None:
        u = q_factor @ u
    if transposed:
        # a.T = u s v.T  =>  a = v s u.T
        return v, sigma, u.T
    return u, sigma, v.T


def singular_values(a, max_sweeps: int = SVD_MAX_SWEEPS, tol: float = SVD_TOL) -> np.ndarray:
    """Singular values of ``a`` in descending order (``min(m, n)`` of them)."""
    return jacobi_svd(a, max_sweeps=max_sweeps, tol=tol)[1]


def sgd_step(param, grad, lr: float) -> np.ndarray:
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_same_shape(param, grad, "sgd_step")
    return param - lr * grad


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, like, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        shape = np.shape(like)
        return cls(np.zeros(shape), np.zeros(shape), 0, beta1, beta2, epsilon)


def adam_step(param, grad, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step on ``param`` given ``grad`` (dLoss/dparam)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_same_shape(param, grad, "adam_step")
    _check_same_shape(param, state.first_moment, "adam_step state")
    _check_same_shape(param, state.second_moment, "adam_step state")

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_param, AdamState(m, v, t, state.beta1, state.beta2, state.epsilon)
