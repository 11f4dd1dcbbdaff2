"""Dense real linear algebra used by the model diagnostics.

Matrices are plain 2-D ``numpy.ndarray`` objects. Diagnostics always run in
float64; :func:`as_matrix` does the conversion and the shape/finiteness checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class DimensionError(ValueError):
    pass


class SvdConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with ``r = min(rows, cols)``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def as_matrix(m, dtype=np.float64) -> np.ndarray:
    a = np.asarray(m, dtype=dtype)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    # Replace the columns flagged False in ``keep`` with an orthonormal
    # completion built from standard basis vectors (deterministic).
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    fill = []
    for e in range(m):
        if len(basis) + len(fill) == u.shape[1]:
            break
        x = np.zeros(m)
        x[e] = 1.0
        for _ in range(2):
            for b in basis + fill:
                x -= (b @ x) * b
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            fill.append(x / nrm)
    out = u.copy()
    it = iter(fill)
    for j in range(u.shape[1]):
        if not keep[j]:
            out[:, j] = next(it)
    return out


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of disjoint column pairs (n padded to even).
    players = list(range(n + (n % 2)))
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(players[i], players[-1 - i]) for i in range(half)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int) -> SvdResult:
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    scale = frobenius_norm(a)
    # columns below this norm are numerically zero and are not rotated
    tiny = (np.finfo(np.float64).eps * max(scale, np.finfo(np.float64).tiny)) ** 2
    schedule = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            wp = w[:, p]
            wq = w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (alpha > tiny) & (beta > tiny) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            wp, wq = wp[:, active], wq[:, active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.sum(w * w, axis=0))
    # stable sort keeps the algorithm's column order among equal values
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    keep = sigma * sigma > tiny
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not np.all(keep):
        u = _complete_basis(u, keep)
    return SvdResult(u=u, sigma=sigma, v=v)


def svd(m, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns are orthogonalised pairwise in cyclic order until every pair has
    cosine below ``tol``. Singular values come out nonincreasing; ties keep the
    order in which the sweep left the columns. Wide inputs are handled through
    the transpose.
    """
    a = as_matrix(m)
    # exact power-of-two rescale keeps squared column norms clear of under/overflow
    peak = float(np.abs(a).max()) if a.size else 0.0
    exp = np.frexp(peak)[1] if peak > 0 else 0
    a = np.ldexp(a, -exp)
    if a.shape[0] >= a.shape[1]:
        r = _jacobi_tall(a, tol, max_sweeps)
        return SvdResult(u=r.u, sigma=np.ldexp(r.sigma, exp), v=r.v)
    r = _jacobi_tall(a.T, tol, max_sweeps)
    return SvdResult(u=r.v, sigma=np.ldexp(r.sigma, exp), v=r.u)


def singular_values(m) -> np.ndarray:
    return svd(m).sigma


def rank(m, tol: float = 1e-9) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))
