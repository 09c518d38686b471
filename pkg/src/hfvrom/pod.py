"""Proper orthogonal decomposition of snapshot sets.

Momentum and species fields live on dual nodes and use the cell-volume
weighted inner product.  Pressure lives on primal vertices and uses the
edge-midpoint quadrature on tetrahedra, which is exact for products of P1
functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DegenerateSnapshots, InvalidArgument, SolverFailure
from .mesh import EDGE_LOCAL

EIG_CUTOFF = 1e-12
ORTHO_TOL = 1e-12
VARIABLES = ("momentum", "pressure", "species")


class InnerProductSpace:
    """L2 inner product of fields sampled on dual nodes (``kind="fv"``) or
    primal vertices (``kind="fe"``).

    Fields have shape ``(n_points,)`` or ``(n_points, k)``; components are
    summed.  Internally everything is reduced to the symmetric weight matrix
    ``W`` acting on point values, so ``<a, b> = sum_l a_l^T W b_l``.
    """

    def __init__(self, kind, n_points, weights=None, matrix=None):
        if kind not in ("fv", "fe"):
            raise InvalidArgument(f"unknown inner product kind {kind!r}")
        self.kind = kind
        self.n_points = int(n_points)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.matrix = matrix
        if self.weights is not None and np.any(self.weights <= 0):
            raise InvalidArgument("inner product weights must be positive")

    @classmethod
    def fv(cls, dual):
        return cls("fv", dual.n_cells, weights=dual.volumes)

    @classmethod
    def fe(cls, primal):
        """Mass matrix of the rule ``sum_T |T| sum_e (1/6) a(x_e) b(x_e)``
        with ``x_e`` the six edge midpoints and midpoint values taken as the
        mean of the two edge vertices."""
        tets = primal.tets
        vol = primal.tet_volumes
        i = tets[:, EDGE_LOCAL[:, 0]].ravel()
        j = tets[:, EDGE_LOCAL[:, 1]].ravel()
        w = np.repeat(vol / 24.0, 6)
        rows = np.concatenate([i, i, j, j])
        cols = np.concatenate([i, j, i, j])
        vals = np.concatenate([w, w, w, w])
        n = primal.n_vertices
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls("fe", n, matrix=mat)

    @property
    def total_weight(self):
        if self.weights is not None:
            return float(self.weights.sum())
        return float(self.matrix.sum())

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape[0] != self.n_points or a.ndim > 2:
            raise InvalidArgument(
                f"field of shape {a.shape} does not match a space with {self.n_points} points")
        return a

    def apply(self, a):
        """``W a`` for one field."""
        a = self._check(a)
        if self.weights is not None:
            return a * self.weights.reshape((-1,) + (1,) * (a.ndim - 1))
        return self.matrix @ a

    def inner(self, a, b):
        a = self._check(a)
        b = self._check(b)
        if a.shape != b.shape:
            raise InvalidArgument(f"field shapes differ: {a.shape} vs {b.shape}")
        return float(np.sum(a * self.apply(b)))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def gram(self, A, B=None):
        """Matrix of inner products between two stacks of fields
        (leading axis enumerates fields)."""
        A = np.asarray(A, dtype=float)
        B = A if B is None else np.asarray(B, dtype=float)
        for X in (A, B):
            if X.ndim < 2 or X.shape[1] != self.n_points:
                raise InvalidArgument(f"field stack of shape {X.shape} does not match the space")
        if A.shape[1:] != B.shape[1:]:
            raise InvalidArgument("field stacks have different layouts")
        WB = np.stack([self.apply(b) for b in B]) if len(B) else B
        return A.reshape(len(A), -1) @ WB.reshape(len(B), -1).T


def inner_product(space, a, b):
    return space.inner(a, b)


def correlation_matrix(space, snapshots):
    """``C_jk = <w^j, w^k> / N_s``, symmetrised exactly."""
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim < 2 or len(snapshots) == 0:
        raise InvalidArgument("correlation matrix needs at least one snapshot")
    C = space.gram(snapshots) / len(snapshots)
    return 0.5 * (C + C.T)


# -- eigensolver --------------------------------------------------------------

def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (``n`` even)."""
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [(idx[k], idx[n - 1 - k]) for k in range(n // 2)]
        rounds.append((np.array([min(p) for p in pairs]), np.array([max(p) for p in pairs])))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def sym_eig(matrix, tol=1e-14, max_sweeps=60, warm_start=True):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in round-robin order so each round touches
    disjoint row/column pairs and can be applied at once.  With
    ``warm_start`` the sweeps start from the LAPACK eigenvectors, so they
    only polish an almost diagonal matrix (one or two sweeps).  Returns
    eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns; each eigenvector has its largest-magnitude
    entry positive.
    """
    A = np.array(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument("sym_eig needs a square matrix")
    n = A.shape[0]
    scale = np.linalg.norm(A)
    if n and np.linalg.norm(A - A.T) > 1e-12 * max(scale, np.finfo(float).tiny):
        raise InvalidArgument("sym_eig input is not symmetric")
    A = 0.5 * (A + A.T)
    m = n + (n % 2)
    if m != n:
        A = np.pad(A, ((0, 1), (0, 1)))
    V = np.eye(m)  # rows hold eigenvectors until the end
    if warm_start and n > 2:
        V[:n, :n] = np.linalg.eigh(A[:n, :n])[1].T
        A = V @ A @ V.T
        A = 0.5 * (A + A.T)
    rounds = _round_robin(m) if m > 1 else []

    def off(X):
        return np.linalg.norm(X - np.diag(np.diag(X)))

    for _ in range(max_sweeps):
        if off(A) <= tol * scale:
            break
        for P, Q in rounds:
            apq = A[P, Q]
            app, aqq = A[P, P], A[Q, Q]
            active = np.abs(apq) > np.finfo(float).tiny
            if not active.any():
                continue
            P, Q, apq, app, aqq = P[active], Q[active], apq[active], app[active], aqq[active]
            theta = (aqq - app) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c, s = c[:, None], s[:, None]
            # J^T A J as two row rotations around a transpose (A symmetric)
            for _ in range(2):
                rp, rq = A[P], A[Q]
                A[P], A[Q] = c * rp - s * rq, s * rp + c * rq
                A = A.T.copy()
            A[P, Q] = 0.0
            A[Q, P] = 0.0
            vp, vq = V[P], V[Q]
            V[P], V[Q] = c * vp - s * vq, s * vp + c * vq
    else:
        if off(A) > tol * scale:
            raise SolverFailure("Jacobi eigensolver did not converge")

    w = np.diag(A)[:n].copy()
    V = V[:n, :n].T
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    pick = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[pick, np.arange(n)] < 0, -1.0, 1.0)
    return w, V


def select_modes(cumulative_energies, kappa):
    """Smallest ``N`` whose cumulative energy reaches ``kappa``."""
    if not 0.0 < kappa <= 1.0:
        raise InvalidArgument(f"kappa must lie in (0, 1], got {kappa}")
    cum = np.asarray(cumulative_energies, dtype=float)
    if cum.size == 0:
        raise InvalidArgument("empty cumulative energy list")
    if np.any(np.diff(cum) < 0):
        raise InvalidArgument("cumulative energies must be nondecreasing")
    hit = np.flatnonzero(cum >= kappa)
    return int(hit[0]) + 1 if hit.size else len(cum)


# -- bases --------------------------------------------------------------------

@dataclass
class PodBasis:
    """Orthonormal POD modes, optionally preceded by a lifting field.

    ``coefficients`` (``N_s x N``) expresses every retained mode as a linear
    combination of the (homogenised) training snapshots; the source basis
    reuses it.
    """

    variable: str
    modes: np.ndarray
    eigenvalues: np.ndarray
    cumulative_energies: np.ndarray
    coefficients: np.ndarray
    lifting: np.ndarray | None = None
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise InvalidArgument(f"unknown variable tag {self.variable!r}")

    @property
    def n_modes(self):
        """Number of energy modes (lifting excluded)."""
        return len(self.modes)

    @property
    def size(self):
        """Number of basis functions used by the reduced model."""
        return self.n_modes + (self.lifting is not None)

    @property
    def field_shape(self):
        return self.modes.shape[1:]

    def functions(self):
        """All basis functions, lifting first."""
        if self.lifting is None:
            return self.modes
        return np.concatenate([self.lifting[None], self.modes])

    def reconstruct(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.size:
            raise InvalidArgument(f"expected {self.size} coefficients, got {coeffs.shape[-1]}")
        return np.tensordot(coeffs, self.functions(), axes=(-1, 0))

    def truncated(self, n):
        """Copy keeping the first ``n`` energy modes."""
        return PodBasis(self.variable, self.modes[:n], self.eigenvalues, self.cumulative_energies,
                        self.coefficients[:, :n], self.lifting, self.eigenvectors)


def _orthonormalize(space, snapshots, alpha):
    """Cholesky re-orthonormalisation of ``modes = snapshots^T alpha``."""
    for _ in range(3):
        modes = np.tensordot(alpha, snapshots, axes=(0, 0))
        G = space.gram(modes)
        if np.max(np.abs(G - np.eye(len(G)))) <= ORTHO_TOL:
            return modes, alpha
        L = np.linalg.cholesky(0.5 * (G + G.T))
        alpha = np.linalg.solve(L, alpha.T).T
    return np.tensordot(alpha, snapshots, axes=(0, 0)), alpha


def build_basis(space, snapshots, kappa, variable="momentum", *, lifting=None,
                reference_energy=0.0):
    """POD basis of ``snapshots`` retaining the energy fraction ``kappa``.

    Mode ``i`` is ``sum_n xi_in w^n / sqrt(lambda_i)`` renormalised to unit
    norm; eigenvalues below ``1e-12 lambda_1`` are never retained.  A set
    whose largest eigenvalue is below ``1e-12 reference_energy`` counts as
    identically zero (used for homogenised sets, where rounding leaves
    residue of the subtracted mean).
    """
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim < 2 or len(snapshots) == 0:
        raise InvalidArgument("build_basis needs at least one snapshot")
    C = correlation_matrix(space, snapshots)
    lam, xi = sym_eig(C)
    if lam.size == 0 or lam[0] <= EIG_CUTOFF * reference_energy or lam[0] <= 0.0:
        if lifting is not None:
            empty = np.zeros((0,) + snapshots.shape[1:])
            return PodBasis(variable, empty, np.zeros(len(lam)), np.ones(len(lam)),
                            np.zeros((len(snapshots), 0)), lifting, xi)
        raise DegenerateSnapshots(f"{variable} snapshots are identically zero")
    lam = np.where(lam < 0.0, 0.0, lam)
    cum = np.cumsum(lam)
    cum = cum / cum[-1]
    n = select_modes(cum, kappa)
    n = min(n, int(np.sum(lam > EIG_CUTOFF * lam[0])))
    alpha = xi[:, :n] / np.sqrt(lam[:n])
    raw = np.tensordot(alpha, snapshots, axes=(0, 0))
    norms = np.sqrt(np.diag(space.gram(raw)))
    alpha = alpha / norms
    modes, alpha = _orthonormalize(space, snapshots, alpha)
    return PodBasis(variable, modes, lam, cum, alpha, lifting, xi)


def build_lifting(snapshots):
    """Snapshot mean and the centred snapshots."""
    snapshots = np.asarray(snapshots, dtype=float)
    if len(snapshots) == 0:
        raise InvalidArgument("build_lifting needs at least one snapshot")
    lift = snapshots.mean(axis=0)
    return lift, snapshots - lift


def build_lifted_basis(space, snapshots, kappa, variable="momentum"):
    """Lifting (snapshot mean) followed by the POD modes of the centred set."""
    lift, centred = build_lifting(snapshots)
    energy = np.trace(correlation_matrix(space, snapshots))
    return build_basis(space, centred, kappa, variable, lifting=lift, reference_energy=energy)


@dataclass
class SourceBasis:
    modes: np.ndarray

    @property
    def size(self):
        return len(self.modes)

    def evaluate(self, coeffs):
        return np.tensordot(np.asarray(coeffs, dtype=float), self.modes, axes=(-1, 0))


def build_source_basis(pod, source_snapshots):
    """Source modes sharing the momentum coefficients.

    Each source mode is the same combination of source snapshots that
    produced the corresponding momentum mode; with a lifting the source mean
    leads and the centred sources feed the remaining modes.
    """
    f = np.asarray(source_snapshots, dtype=float)
    if len(f) != pod.coefficients.shape[0]:
        raise InvalidArgument(
            f"{len(f)} source snapshots for {pod.coefficients.shape[0]} momentum snapshots")
    if pod.lifting is not None:
        mean = f.mean(axis=0)
        modes = np.tensordot(pod.coefficients, f - mean, axes=(0, 0))
        return SourceBasis(np.concatenate([mean[None], modes]))
    return SourceBasis(np.tensordot(pod.coefficients, f, axes=(0, 0)))


def projection_coefficients(space, basis, fields):
    """Coefficients of the orthogonal projection onto ``basis`` (solves the
    mass-matrix system when the basis has a lifting)."""
    funcs = basis.functions()
    fields = np.asarray(fields, dtype=float)
    single = fields.ndim == len(basis.field_shape)
    stack = fields[None] if single else fields
    if len(funcs) == 0:
        out = np.zeros((len(stack), 0))
    else:
        M = space.gram(funcs)
        rhs = space.gram(funcs, stack)
        out = np.linalg.solve(M, rhs).T
    return out[0] if single else out


def projection_errors(space, basis, fields, counts):
    """Relative projection error of each field for each truncation in ``counts``."""
    fields = np.asarray(fields, dtype=float)
    ref = np.sqrt(np.maximum(np.einsum("ii->i", space.gram(fields)), 0.0))
    out = np.zeros((len(counts), len(fields)))
    for r, n in enumerate(counts):
        b = basis.truncated(n)
        err = fields - b.reconstruct(projection_coefficients(space, b, fields))
        out[r] = np.sqrt(np.maximum(np.einsum("ii->i", space.gram(err)), 0.0)) / ref
    return out
