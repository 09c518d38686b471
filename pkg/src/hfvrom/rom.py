"""Galerkin reduced model: offline operator assembly and online integration.

Momentum coefficients ``a`` evolve by

    M da/dt = -C(a, a) + B a - K b + F a,

the pressure coefficients ``b`` come from the reduced Poisson problem

    N b = D(a, a) + H a + P a + G(t)    (plus the constant shift s),

and the species coefficients by ``dc/dt = -E(a, c) + Q c``.  Quadratic
forms contract the last two indices: ``C(a, a)_i = sum_jk C_ijk a_j a_k``.
Signs produced by integration by parts are stored inside ``H`` and ``G``.

Two assemblies share this form.  ``method="consistent"`` (default) projects
the discrete full-order operators: central part of the Rusanov flux, the
facet viscous flux, the cell pressure integrals and the divergence
functional of the projection stage, with the prescribed rate of the
Dirichlet cells as a forcing term.  The Rusanov upwind part depends on
``max |u.S|`` and is kept as per-facet arrays evaluated online
(``dissipation="exact"``) or folded into ``B``, ``P`` and ``Q`` with facet
speeds frozen at their training mean (``dissipation="frozen"``).
``method="derivative"`` builds every operator from :func:`mode_derivatives`.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, sparse

from .errors import DegenerateElement, IllConditionedBasis, InvalidArgument, NumericalBlowup
from .fom import assemble_poisson, boundary_load, consistent_poisson

log = logging.getLogger(__name__)

METHODS = ("consistent", "derivative")
DISSIPATION = ("exact", "frozen")


# -- derivatives of dual-node fields -----------------------------------------

@functools.lru_cache(maxsize=8)
def _tet_gradient_matrices(dual):
    """Sparse ``(nT, nC)`` matrices giving the element gradient components of
    a dual-node field (affine fit through the four face values)."""
    pm = dual.primal
    vol = pm.tet_volumes
    if np.any(vol <= 0):
        raise DegenerateElement("non-positive tetrahedron volume", int(np.argmin(vol)))
    rows = np.repeat(np.arange(pm.n_tets), 4)
    cols = pm.tet_faces.ravel()
    out = []
    for c in range(3):
        vals = (pm.tet_face_areas[:, :, c] / vol[:, None]).ravel()
        out.append(sparse.csr_matrix((vals, (rows, cols)), shape=(pm.n_tets, dual.n_cells)))
    return tuple(out)


@functools.lru_cache(maxsize=8)
def _node_gradient_matrices(dual):
    return tuple((dual.tet_to_cell @ T).tocsr() for T in _tet_gradient_matrices(dual))


def _apply(mats, f):
    """Stack ``mats[c] @ f`` along a new last axis."""
    f = np.asarray(f, dtype=float)
    flat = f.reshape(len(f), -1)
    out = [(m @ flat).reshape((m.shape[0],) + f.shape[1:]) for m in mats]
    return np.stack(out, axis=-1)


def tet_gradient(dual, f):
    """Per-tet gradient, shape ``(nT, ..., 3)``."""
    return _apply(_tet_gradient_matrices(dual), f)


def node_gradient_field(dual, f):
    """Per-node gradient (mean over generating tets), shape ``(nC, ..., 3)``."""
    return _apply(_node_gradient_matrices(dual), f)


def tet_divergence(dual, v):
    """Per-tet divergence of the last axis of ``v`` (``(nC, ..., 3)``)."""
    return np.einsum("...ii->...", tet_gradient(dual, v))


def node_divergence(dual, v):
    return np.einsum("...ii->...", node_gradient_field(dual, v))


def _curl(g):
    """Curl from a gradient array with ``g[..., l, m] = d_m v_l``."""
    return np.stack([g[..., 2, 1] - g[..., 1, 2],
                     g[..., 0, 2] - g[..., 2, 0],
                     g[..., 1, 0] - g[..., 0, 1]], axis=-1)


def mode_derivatives(dual, f):
    """First and second derivatives of a dual-node field.

    Returns a dict with the per-node ``grad``; for vector fields also
    ``div``, ``curl`` and the per-tet ``curlcurl``; and ``laplacian`` (the
    divergence of the node gradient, at nodes).  Second derivatives apply the
    first-derivative machinery twice.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[0] != dual.n_cells:
        raise InvalidArgument(f"field has {f.shape[0]} rows, mesh has {dual.n_cells} cells")
    g = node_gradient_field(dual, f)
    out = {"grad": g, "laplacian": node_divergence(dual, g)}
    if f.ndim == 2 and f.shape[1] == 3:
        out["div"] = np.einsum("...ii->...", g)
        curl = _curl(g)
        out["curl"] = curl
        out["curlcurl"] = _curl(tet_gradient(dual, curl))
    return out


# -- operators ----------------------------------------------------------------

OPERATOR_NAMES = ("M", "B", "C", "K", "F", "N", "D", "H", "P", "G", "E", "Q")


@dataclass
class RomOperators:
    """Reduced operators.

    ``G`` is stored as weights ``g_weights`` (``N_pi x n_b x 3``) on the
    Dirichlet boundary points ``b_points``; ``G(t)`` contracts them with the
    time derivative of the boundary velocity.  ``m_weights`` (``N x n_b x 3``)
    does the same for the momentum equation.

    The ``diss_*`` arrays hold the upwind dissipation in factored form (empty
    when it is absent or frozen): facet ``f`` contributes
    ``s_f (test_i,f . jump_f(a))`` with ``s_f`` the facet speed, ``jump`` the
    right-minus-left difference of the reconstructed field and ``test`` half
    the interior test-function jump.
    """

    M: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    F: np.ndarray
    N: np.ndarray
    D: np.ndarray
    H: np.ndarray
    P: np.ndarray
    E: np.ndarray
    Q: np.ndarray
    g_weights: np.ndarray
    m_weights: np.ndarray
    b_points: np.ndarray
    b_tags: np.ndarray
    diss_u_left: np.ndarray
    diss_u_right: np.ndarray
    diss_test_momentum: np.ndarray
    diss_jump_momentum: np.ndarray
    diss_test_pressure: np.ndarray
    diss_test_species: np.ndarray
    diss_jump_species: np.ndarray

    @property
    def dims(self):
        return self.M.shape[0], self.N.shape[0], self.Q.shape[0]

    @property
    def n_dissipation_facets(self):
        return self.diss_u_left.shape[0]

    def _boundary_rate(self, t, bc):
        if bc is None or not bc.velocity_dt or len(self.b_points) == 0:
            return None
        return bc.velocity_dt_at(self.b_points, self.b_tags, t)

    def G(self, t, bc=None, rate=None):
        rate = self._boundary_rate(t, bc) if rate is None else rate
        if rate is None:
            return np.zeros(self.N.shape[0])
        return np.einsum("ibj,bj->i", self.g_weights, rate)

    def boundary_forcing(self, t, bc=None, rate=None):
        rate = self._boundary_rate(t, bc) if rate is None else rate
        if rate is None:
            return np.zeros(self.M.shape[0])
        return np.einsum("ibj,bj->i", self.m_weights, rate)

    def speeds(self, a):
        """Rusanov wave speed ``max(|u_L.S|, |u_R.S|)`` on each facet."""
        return np.maximum(np.abs(self.diss_u_left @ a), np.abs(self.diss_u_right @ a))

    def ablated(self):
        """Copy with the pressure-gradient coupling removed."""
        return replace(self, K=np.zeros_like(self.K))

    def check(self):
        for name in ("M", "B", "C", "K", "F", "N", "D", "H", "P", "E", "Q",
                     "g_weights", "m_weights", "diss_u_left", "diss_u_right",
                     "diss_test_momentum", "diss_jump_momentum", "diss_test_pressure",
                     "diss_test_species", "diss_jump_species"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise IllConditionedBasis(f"operator {name} has non-finite entries")
        if self.M.size and np.any(np.linalg.eigvalsh(self.M) <= 0):
            raise IllConditionedBasis("reduced mass matrix is not positive definite")


def _fv_inner(dual, A, B):
    """``<A_i, B_j>`` for stacks of dual-node fields."""
    w = dual.volumes
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    A = np.asarray(A, dtype=float).reshape(len(A), dual.n_cells, -1)
    B = np.asarray(B, dtype=float).reshape(len(B), dual.n_cells, -1)
    return np.einsum("inl,n,jnl->ij", A, w, B)


def _fe_tet_weights(primal, psi):
    """``|T| mean(psi over the tet's vertices)``: the edge-midpoint rule
    applied to ``psi`` times an element-wise constant."""
    return psi[:, primal.tets].mean(axis=-1) * primal.tet_volumes


def _as_stacks(dual, phi, psi, chi):
    phi = np.asarray(phi, dtype=float).reshape(-1, dual.n_cells, 3)
    psi = np.asarray(psi, dtype=float).reshape(-1, dual.primal.n_vertices)
    chi = np.asarray(chi, dtype=float).reshape(-1, dual.n_cells)
    return phi, psi, chi


def assemble_momentum_ops(dual, phi, psi, source, params):
    """``M, B, C, K, F`` from :func:`mode_derivatives` for momentum basis
    functions ``phi`` (``N x nC x 3``), pressure modes ``psi`` (``N_pi x nV``)
    and source modes (``N x nC x 3``)."""
    phi, psi, _ = _as_stacks(dual, phi, psi, ())
    n = len(phi)
    if source is not None and len(source) != n:
        raise InvalidArgument(f"{len(source)} source modes for {n} momentum modes")
    rho, nu = params.rho, params.mu / params.rho
    M = _fv_inner(dual, phi, phi)
    M = 0.5 * (M + M.T)
    lap = np.stack([mode_derivatives(dual, p)["laplacian"] for p in phi]) if n else phi
    B = nu * _fv_inner(dual, phi, lap)
    C = np.zeros((n, n, n))
    for j in range(n):
        T = phi[j][None, :, :, None] * phi[:, :, None, :]          # (k, nC, l, m)
        div = node_divergence(dual, np.moveaxis(T, 0, 1))           # (nC, k, l)
        C[:, j, :] = _fv_inner(dual, phi, np.moveaxis(div, 1, 0)) / rho
    pm = dual.primal
    gpsi = np.stack([dual.to_nodes(pm.tet_gradients(p)) for p in psi]) if len(psi) \
        else np.zeros((0, dual.n_cells, 3))
    K = _fv_inner(dual, phi, gpsi)
    F = _fv_inner(dual, phi, source) if source is not None else np.zeros((n, n))
    return M, B, C, K, F


def assemble_pressure_ops(dual, psi, phi, source, params):
    """``N, D, H, P`` and the boundary weights of ``G`` from
    :func:`mode_derivatives`.

    Testing the pressure Poisson equation with ``psi_i`` and integrating by
    parts gives ``<grad psi_i, grad pi> = <<psi_i, div div(w u)>> - <<psi_i,
    div f>> - int psi_i (mu/rho) rotrot(w).eta - int psi_i rho g_t.eta``; the
    minus signs are stored in ``H``, ``P`` and ``G``.
    """
    pm = dual.primal
    phi, psi, _ = _as_stacks(dual, phi, psi, ())
    n, npi = len(phi), len(psi)
    rho, nu = params.rho, params.mu / params.rho
    A = assemble_poisson(pm)
    Nmat = psi @ (A @ psi.T)
    Nmat = 0.5 * (Nmat + Nmat.T)
    wt = _fe_tet_weights(pm, psi)                                    # (N_pi, nT)
    D = np.zeros((npi, n, n))
    for j in range(n):
        T = phi[j][:, None, :, None] * np.moveaxis(phi, 0, 1)[:, :, None, :]   # (nC, k, l, m)
        divdiv = tet_divergence(dual, node_divergence(dual, T))      # (nT, k)
        D[:, j, :] = wt @ divdiv / rho
    if source is not None and len(source):
        divs = np.stack([tet_divergence(dual, s) for s in source], axis=1)      # (nT, N)
        H = -(wt @ divs)
    else:
        H = np.zeros((npi, n))
    bf = dual.bfacet_cell
    owner = pm.face_tets[bf, 0]
    psi_face = psi[:, pm.faces[bf]].mean(axis=-1)                    # (N_pi, n_b)
    P = np.zeros((npi, n))
    for j in range(n):
        rr = mode_derivatives(dual, phi[j])["curlcurl"][owner]       # (n_b, 3)
        P[:, j] = -nu * psi_face @ np.einsum("fj,fj->f", rr, dual.bfacet_area)
    g_weights = -rho * psi_face[:, :, None] * dual.bfacet_area[None]
    return Nmat, D, H, P, g_weights


def assemble_transport_ops(dual, chi, phi, params):
    """``E_ijk = <chi_i, div(phi_j chi_k)> / rho`` and ``Q_ij = <chi_i, D lap chi_j>``
    from :func:`mode_derivatives`."""
    phi, _, chi = _as_stacks(dual, phi, (), chi)
    ny, n = len(chi), len(phi)
    E = np.zeros((ny, n, ny))
    for j in range(n):
        flux = phi[j][None, :, :] * chi[:, :, None]                  # (k, nC, 3)
        div = node_divergence(dual, np.moveaxis(flux, 0, 1))          # (nC, k)
        E[:, j, :] = _fv_inner(dual, chi, div.T) / params.rho
    if params.diffusivity > 0 and ny:
        lap = np.stack([mode_derivatives(dual, c)["laplacian"] for c in chi])
        Q = params.diffusivity * _fv_inner(dual, chi, lap)
    else:
        Q = np.zeros((ny, ny))
    return E, Q


def facet_speeds(dual, momentum, rho=1.0):
    """Rusanov speeds ``max(|u_L.S|, |u_R.S|)`` of momentum field(s)."""
    W = np.asarray(momentum, dtype=float) / rho
    S = dual.facet_area
    uL = np.einsum("...fl,fl->...f", W[..., dual.facet_left, :], S)
    uR = np.einsum("...fl,fl->...f", W[..., dual.facet_right, :], S)
    return np.maximum(np.abs(uL), np.abs(uR))


def _empty(*shape):
    return np.zeros(shape)


def _no_dissipation(n, npi, ny):
    return (_empty(0, n), _empty(0, n), _empty(n, 0, 3), _empty(n, 0, 3),
            _empty(npi, 0, 3), _empty(ny, 0), _empty(ny, 0))


def _derivative_operators(dual, phi, psi, chi, source, params):
    M, B, C, K, F = assemble_momentum_ops(dual, phi, psi, source, params)
    Nmat, D, H, P, gw = assemble_pressure_ops(dual, psi, phi, source, params)
    E, Q = assemble_transport_ops(dual, chi, phi, params)
    n, npi, ny = len(phi), len(psi), len(chi)
    nb = len(dual.bfacet_cell)
    return RomOperators(M, B, C, K, F, Nmat, D, H, P, E, Q, gw, _empty(n, nb, 3),
                        dual.bfacet_centroid.copy(), dual.tags[dual.bfacet_cell].astype(str),
                        *_no_dissipation(n, npi, ny))


def _consistent_operators(dual, phi, psi, chi, source, params, dissipation, speeds):
    rho, mu, diff = params.rho, params.mu, params.diffusivity
    n, npi, ny = len(phi), len(psi), len(chi)
    L, R, S = dual.facet_left, dual.facet_right, dual.facet_area
    ftet = dual.facet_tet
    vol = dual.volumes
    m = (~dual.boundary).astype(float)
    bcell = dual.bfacet_cell

    # test jumps: contribution of a facet quantity to the interior cells
    tphi = m[L, None] * phi[:, L] - m[R, None] * phi[:, R]                 # (N, nf, 3)
    psit = psi - psi.mean(axis=1, keepdims=True)
    gpsi = np.stack([np.stack([G @ p for G in dual.cell_gradient_matrices], axis=-1)
                     for p in psit]) if npi else np.zeros((0, dual.n_cells, 3))
    q = gpsi * (m / vol)[None, :, None]
    tpsi = q[:, L] - q[:, R]                                                # (N_pi, nf, 3)
    tchi = m[L] * chi[:, L] - m[R] * chi[:, R]                              # (N_y, nf)

    M = _fv_inner(dual, phi, phi)
    M = 0.5 * (M + M.T)
    uL = np.einsum("kfl,fl->kf", phi[:, L], S) / rho                       # (N, nf)
    uR = np.einsum("kfl,fl->kf", phi[:, R], S) / rho
    C = np.zeros((n, n, n))
    D = np.zeros((npi, n, n))
    B = np.zeros((n, n))
    P = np.zeros((npi, n))
    for j in range(n):
        flux = 0.5 * (phi[j][L][None] * uL[:, :, None] + phi[j][R][None] * uR[:, :, None])
        C[:, j, :] = np.einsum("ifl,kfl->ik", tphi, flux)
        D[:, j, :] = -np.einsum("ifl,kfl->ik", tpsi, flux)
        if mu > 0:
            grad = dual.face_gradients(phi[j] / rho)[ftet]                 # (nf, 3, 3)
            visc = mu * np.einsum("fij,fj->fi", grad, S)
            B[:, j] = np.einsum("ifl,fl->i", tphi, visc)
            P[:, j] = np.einsum("ifl,fl->i", tpsi, visc)
    interior = np.flatnonzero(m)
    K = np.einsum("inl,jnl->ij", phi[:, interior], gpsi[:, interior]) if npi \
        else np.zeros((n, 0))
    if source is not None:
        source = np.asarray(source, dtype=float)
        F = np.einsum("inl,n,jnl->ij", phi[:, interior], vol[interior], source[:, interior])
        H = np.einsum("inl,jnl->ij", gpsi[:, interior], source[:, interior])
    else:
        F, H = np.zeros((n, n)), np.zeros((npi, n))

    E = np.zeros((ny, n, ny))
    for j in range(n):
        flux = 0.5 * (uL[j][None] * chi[:, L] + uR[j][None] * chi[:, R])   # (k, nf)
        E[:, j, :] = tchi @ flux.T
    Q = np.zeros((ny, ny))
    if diff > 0:
        for j in range(ny):
            grad = dual.face_gradients(chi[j])[ftet]                        # (nf, 3)
            Q[:, j] = tchi @ (diff * np.einsum("fj,fj->f", grad, S))

    # Dirichlet cells follow the prescribed data: rate rho g_t at their nodes
    m_weights = rho * (vol[bcell][None, :, None] * phi[:, bcell])
    eta = dual.bfacet_area / np.linalg.norm(dual.bfacet_area, axis=1)[:, None]
    load = (boundary_load(dual).T @ psit.T).T if npi else np.zeros((0, len(bcell)))
    g_weights = rho * (gpsi[:, bcell] - load[:, :, None] * eta[None])

    Nmat = psi @ (consistent_poisson(dual) @ psi.T)
    Nmat = 0.5 * (Nmat + Nmat.T)

    # facets whose two cells are both Dirichlet cells carry no dissipation
    keep = np.flatnonzero(m[L] + m[R] > 0)
    diss = (uL.T[keep], uR.T[keep], 0.5 * tphi[:, keep], (phi[:, R] - phi[:, L])[:, keep],
            0.5 * tpsi[:, keep], 0.5 * tchi[:, keep], (chi[:, R] - chi[:, L])[:, keep])
    if dissipation == "frozen":
        if speeds is None:
            raise InvalidArgument("frozen dissipation needs facet speeds")
        s = np.asarray(speeds, dtype=float)[keep]
        _, _, tm, jm, tp, ty, jy = diss
        B = B + np.einsum("ifl,f,kfl->ik", tm, s, jm)
        P = P + np.einsum("ifl,f,kfl->ik", tp, s, jm)
        Q = Q + np.einsum("if,f,kf->ik", ty, s, jy)
        diss = _no_dissipation(n, npi, ny)
    return RomOperators(M, B, C, K, F, Nmat, D, H, P, E, Q, g_weights, m_weights,
                        dual.bfacet_centroid.copy(), dual.tags[bcell].astype(str), *diss)


def assemble_operators(dual, phi, psi, chi, source, params, *, method="consistent",
                       dissipation="exact", speeds=None):
    """All reduced operators for the given basis functions.

    ``speeds`` (mean facet Rusanov speeds, see :func:`facet_speeds`) is only
    used with ``dissipation="frozen"``.
    """
    if method not in METHODS:
        raise InvalidArgument(f"unknown operator method {method!r}")
    if dissipation not in DISSIPATION:
        raise InvalidArgument(f"unknown dissipation treatment {dissipation!r}")
    phi, psi, chi = _as_stacks(dual, phi, psi, chi)
    if source is not None and len(source) != len(phi):
        raise InvalidArgument(f"{len(source)} source modes for {len(phi)} momentum modes")
    if method == "derivative":
        ops = _derivative_operators(dual, phi, psi, chi, source, params)
    else:
        ops = _consistent_operators(dual, phi, psi, chi, source, params, dissipation, speeds)
    ops.check()
    return ops


# -- online stage -------------------------------------------------------------

@dataclass
class RomState:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    time: float

    def copy(self):
        return RomState(self.a.copy(), self.b.copy(), self.c.copy(), self.time)


def project_initial(state0, dual, phi, psi, chi, M=None):
    """Galerkin projection of a full state: ``M a_0 = e``, ``b_0`` and
    ``c_0`` by plain projection on the orthonormal pressure/species modes."""
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float).reshape(-1, dual.primal.n_vertices)
    chi = np.asarray(chi, dtype=float).reshape(-1, dual.n_cells)
    if M is None:
        M = _fv_inner(dual, phi, phi)
    e = _fv_inner(dual, phi, state0.momentum[None])[:, 0] if len(phi) else np.zeros(0)
    try:
        a = linalg.solve(M, e, assume_a="pos") if len(phi) else e
    except linalg.LinAlgError as exc:
        raise IllConditionedBasis("reduced mass matrix is singular") from exc
    from .pod import InnerProductSpace
    fe = InnerProductSpace.fe(dual.primal)
    b = np.array([fe.inner(p, state0.pressure) for p in psi])
    c = _fv_inner(dual, chi, state0.species[None])[:, 0] if len(chi) else np.zeros(0)
    return RomState(a, b, c, float(state0.time))


class ReducedModel:
    """Reduced operators bound to boundary data, with factorised ``M`` and
    ``N`` and the pressure shift fixed at the initial time."""

    def __init__(self, ops: RomOperators, bc=None):
        self.ops = ops
        self.bc = bc
        n, npi, _ = ops.dims
        try:
            self._m = linalg.cho_factor(ops.M) if n else None
        except linalg.LinAlgError as exc:
            raise IllConditionedBasis("reduced mass matrix is not positive definite") from exc
        self._n = None
        if npi:
            Nm = ops.N + 1e-14 * np.trace(ops.N) * np.eye(npi)
            if np.linalg.cond(Nm) > 1e14:
                raise IllConditionedBasis("reduced pressure matrix is ill conditioned")
            try:
                self._n = linalg.cho_factor(Nm)
            except linalg.LinAlgError as exc:
                raise IllConditionedBasis("reduced pressure matrix is singular") from exc
        nf = ops.n_dissipation_facets
        ny = ops.dims[2]
        self._tm = ops.diss_test_momentum.reshape(n, nf * 3)
        self._jm = ops.diss_jump_momentum.reshape(n, nf * 3)
        self._tp = ops.diss_test_pressure.reshape(npi, nf * 3)
        self._ty = ops.diss_test_species.reshape(ny, nf)
        self._jy = ops.diss_jump_species.reshape(ny, nf)
        self.shift = np.zeros(npi)
        self._rate = None
        if bc is not None and bc.velocity_dt and len(ops.b_points):
            self._rate = bc.velocity_dt_evaluator(ops.b_points, ops.b_tags)

    def _dissipation(self, a):
        """Upwind contributions ``(momentum vector, pressure vector, species
        matrix)`` at the facet speeds of ``a`` (``None`` when absent)."""
        o = self.ops
        if o.n_dissipation_facets == 0:
            return None
        s = o.speeds(a)
        sj = (s[:, None] * (a @ self._jm).reshape(-1, 3)).ravel()
        ys = self._ty * s
        return self._tm @ sj, self._tp @ sj, ys @ self._jy.T

    def _boundary_rate(self, t):
        if self._rate is None:
            return None
        return self._rate(t)

    def pressure_rhs(self, a, t, diss=None, rate=None):
        o = self.ops
        rhs = np.einsum("ijk,j,k->i", o.D, a, a) + o.H @ a + o.P @ a
        if rate is not None:
            rhs = rhs + o.G(t, rate=rate)
        if diss is not None:
            rhs = rhs + diss[1]
        return rhs

    def _pressure(self, a, t, diss, rate):
        if self._n is None:
            return np.zeros(0)
        return linalg.cho_solve(self._n, self.pressure_rhs(a, t, diss, rate))

    def pressure(self, a, t):
        """Pressure coefficients without the constant shift."""
        return self._pressure(a, t, self._dissipation(a), self._boundary_rate(t))

    def recover_pressure(self, a, t):
        return self.pressure(a, t) + self.shift

    def set_shift(self, state: RomState):
        """Fix ``s`` so that ``recover_pressure(a_0, t_0) = b_0``."""
        if len(state.b):
            self.shift = state.b - self.pressure(state.a, state.time)

    def rates(self, a, c, t):
        o = self.ops
        diss = self._dissipation(a)
        rate = self._boundary_rate(t)
        if len(a):
            rhs = -np.einsum("ijk,j,k->i", o.C, a, a) + o.B @ a + o.F @ a
            if o.K.size:
                rhs = rhs - o.K @ self._pressure(a, t, diss, rate)
            if rate is not None:
                rhs = rhs + o.boundary_forcing(t, rate=rate)
            if diss is not None:
                rhs = rhs + diss[0]
            if not np.all(np.isfinite(rhs)):
                raise NumericalBlowup(f"reduced right side became non-finite at t={t:.6g}", time=t)
            da = linalg.cho_solve(self._m, rhs)
        else:
            da = a
        if len(c):
            dc = -np.einsum("ijk,j,k->i", o.E, a, c) + o.Q @ c
            if diss is not None:
                dc = dc + diss[2] @ c
        else:
            dc = c
        return da, dc

    def step(self, state: RomState, dt):
        """One classical Runge-Kutta step of the coupled ``(a, c)`` system."""
        if dt <= 0:
            raise InvalidArgument("time step must be positive")
        a, c, t = state.a, state.c, state.time
        k1 = self.rates(a, c, t)
        k2 = self.rates(a + 0.5 * dt * k1[0], c + 0.5 * dt * k1[1], t + 0.5 * dt)
        k3 = self.rates(a + 0.5 * dt * k2[0], c + 0.5 * dt * k2[1], t + 0.5 * dt)
        k4 = self.rates(a + dt * k3[0], c + dt * k3[1], t + dt)
        a = a + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        c = c + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        t = t + dt
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(c))):
            raise NumericalBlowup(f"reduced state became non-finite at t={t:.6g}", time=t)
        return RomState(a, self.recover_pressure(a, t), c, t)

    def run(self, state0: RomState, times, substeps=50):
        """Integrate from ``state0`` through the increasing output ``times``
        with ``substeps`` equal RK4 steps between consecutive outputs."""
        self.set_shift(state0)
        state = state0.copy()
        out = []
        for target in np.asarray(times, dtype=float):
            if target < state.time - 1e-12:
                raise InvalidArgument("output times must be increasing")
            span = target - state.time
            if span > 0:
                dt = span / substeps
                for _ in range(substeps):
                    state = self.step(state, dt)
                state.time = float(target)
            out.append(state.copy())
        return out


def rom_step(state, model: ReducedModel, dt):
    return model.step(state, dt)


def recover_pressure(a, model: ReducedModel, t):
    return model.recover_pressure(a, t)


def reconstruct(state: RomState, phi, psi, chi, time=None):
    """Full fields from coefficients."""
    from .fom import FomState

    def comb(coef, funcs, shape):
        funcs = np.asarray(funcs, dtype=float)
        if len(coef) != len(funcs):
            raise InvalidArgument(f"{len(coef)} coefficients for {len(funcs)} functions")
        if len(funcs) == 0:
            return np.zeros(shape)
        return np.tensordot(coef, funcs, axes=(0, 0))

    phi, psi, chi = (np.asarray(x, dtype=float) for x in (phi, psi, chi))
    return FomState(comb(state.a, phi, phi.shape[1:]),
                    comb(state.b, psi, psi.shape[1:]),
                    comb(state.c, chi, chi.shape[1:]),
                    state.time if time is None else time)
