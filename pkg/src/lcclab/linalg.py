"""Small dense linear algebra used throughout the pipeline.

The SVD here is a one-sided (Hestenes) Jacobi iteration written directly in
numpy.  Matrices in this project are tiny (a few hundred rows, at most a few
hundred columns) so accuracy and reproducibility matter more than speed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateVectorWarning",
    "SvdFactors",
    "svd_thin",
    "complete_basis",
    "cosine_similarity",
    "frobenius_rel_error",
]

MAX_COLS = 512
_MAX_SWEEPS = 80
_ZERO_SIGMA = 1e-150


class DegenerateVectorWarning(UserWarning):
    """A similarity was requested for a zero vector."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = U @ diag(sigma) @ V.T``.

    ``U`` is ``(rows, r)``, ``V`` is ``(cols, r)`` and ``sigma`` is sorted
    descending, with ``r = min(rows, cols)``.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def _check_finite(m: np.ndarray, name: str = "matrix") -> None:
    bad = ~np.isfinite(m)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{name} has a non-finite entry {m[idx]!r} at index {idx}")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``a`` (rows >= cols) in place.

    Returns the rotated columns and the accumulated right rotation ``V``.
    """
    n = a.shape[1]
    v = np.eye(n)
    if n < 2:
        return a, v
    fro2 = float(np.sum(a * a))
    if fro2 == 0.0:
        return a, v
    abs_tol = 1e-12 * fro2
    rounds = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            # rotate on the relative criterion so small singular vectors stay orthogonal
            active = np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta)
            active &= np.abs(gamma) > 1e-300
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
        gram = a.T @ a
        np.fill_diagonal(gram, 0.0)
        if np.max(np.abs(gram)) < abs_tol and not _needs_relative_pass(a, gram):
            break
    return a, v


def _needs_relative_pass(a: np.ndarray, gram: np.ndarray) -> bool:
    norms = np.sqrt(np.einsum("ij,ij->j", a, a))
    scale = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, np.abs(gram) / scale, 0.0)
    return bool(np.max(rel) > 1e-12)


def complete_basis(q: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Extend orthonormal columns ``q`` to a full orthonormal basis.

    New columns come from Gram-Schmidt over the standard basis in index
    order, so the result is deterministic.
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0] if dim is None else dim
    cols = [q[:, j] for j in range(q.shape[1])]
    for i in range(n):
        if len(cols) == n:
            break
        e = np.zeros(n)
        e[i] = 1.0
        for _ in range(2):
            for c in cols:
                e = e - (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            cols.append(e / norm)
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0))


def _fill_null_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    if good.all():
        return u
    basis = complete_basis(u[:, good], u.shape[0])
    out = u.copy()
    out[:, ~good] = basis[:, int(good.sum()) : int(good.sum()) + int((~good).sum())]
    return out


def svd_thin(m) -> SvdFactors:
    """Thin SVD by one-sided Jacobi rotations.

    Sign convention: the largest-magnitude entry of every right singular
    vector is non-negative (ties resolved at the lowest index).
    """
    m = np.array(m, dtype=np.float64, copy=True)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    _check_finite(m)
    rows, cols = m.shape
    if min(rows, cols) > MAX_COLS:
        raise ValueError(f"matrix {m.shape} exceeds desk-scale limit of {MAX_COLS}")
    transposed = rows < cols
    a = m.T.copy() if transposed else m
    a, v = _jacobi_tall(a)
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    good = sigma > _ZERO_SIGMA
    u = np.zeros_like(a)
    u[:, good] = a[:, good] / sigma[good]
    sigma = np.where(good, sigma, 0.0)
    u = _fill_null_columns(u, good)
    if transposed:
        u, v = v, u
    lead = np.argmax(np.abs(v), axis=0)
    flip = v[lead, np.arange(v.shape[1])] < 0
    v[:, flip] *= -1.0
    u[:, flip] *= -1.0
    return SvdFactors(U=u, sigma=sigma, V=v)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0.0 if either is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero vector taken as 0", DegenerateVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def frobenius_rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-30))
