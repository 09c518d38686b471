"""Full-order projection solver on the staggered primal/dual pair.

Each time step runs three uncoupled stages:

1. explicit finite volume transport-diffusion for momentum and species on the
   dual cells (Rusanov convective flux, element-gradient viscous flux);
2. a P1 finite element Poisson problem for the pressure increment;
3. the post-projection update of the momentum.

Dirichlet data is imposed strongly on boundary dual cells, whose nodes lie
on the boundary.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import InvalidArgument, NumericalBlowup, SolverFailure
from .mesh import DualMesh

log = logging.getLogger(__name__)

VELOCITY_EPS = 1e-12
DEFAULT_TOLERANCE = 1e-10


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1.0
    mu: float = 0.0
    diffusivity: float = 0.0

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidArgument(f"rho must be positive, got {self.rho}")
        if not self.mu >= 0:
            raise InvalidArgument(f"mu must be non-negative, got {self.mu}")
        if not self.diffusivity >= 0:
            raise InvalidArgument(f"diffusivity must be non-negative, got {self.diffusivity}")


@dataclass
class FomState:
    momentum: np.ndarray      # (nC, 3) on dual nodes
    pressure: np.ndarray      # (nV,) on primal vertices
    species: np.ndarray       # (nC,)
    time: float = 0.0

    def copy(self):
        return FomState(self.momentum.copy(), self.pressure.copy(),
                        self.species.copy(), self.time)


def _zero_vector(x, t):
    return np.zeros((len(x), 3))


def _zero_scalar(x, t):
    return np.zeros(len(x))


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet data per boundary tag.

    ``velocity[tag](x, t)`` returns the velocity ``g`` at points ``x`` (the
    momentum is ``rho * g``), ``velocity_dt`` its time derivative and
    ``species`` the species value.
    """

    velocity: dict
    velocity_dt: dict = field(default_factory=dict)
    species: dict = field(default_factory=dict)

    def validate(self, dual: DualMesh):
        missing = set(dual.tags[dual.boundary]) - set(self.velocity)
        if missing:
            raise InvalidArgument(f"no boundary data for regions {sorted(missing)}")

    @staticmethod
    def _groups(table, default, tags):
        """``(callable, point indices)`` pairs, one per distinct callable."""
        groups = {}
        for tag in np.unique(tags):
            groups.setdefault(table.get(tag, default), []).append(tag)
        return [(fn, np.flatnonzero(np.isin(tags, members))) for fn, members in groups.items()]

    def _eval(self, table, default, points, tags, t, width):
        out = np.zeros((len(points), 3)) if width == 3 else np.zeros(len(points))
        for fn, idx in self._groups(table, default, tags):
            out[idx] = fn(points[idx], t)
        return out

    def velocity_dt_evaluator(self, points, tags):
        """``f(t)`` returning the boundary velocity rate at fixed points."""
        groups = [(fn, idx, points[idx])
                  for fn, idx in self._groups(self.velocity_dt, _zero_vector, tags)]

        def evaluate(t):
            out = np.zeros((len(points), 3))
            for fn, idx, x in groups:
                out[idx] = fn(x, t)
            return out
        return evaluate

    def velocity_at(self, points, tags, t):
        return self._eval(self.velocity, _zero_vector, points, tags, t, 3)

    def velocity_dt_at(self, points, tags, t):
        return self._eval(self.velocity_dt, _zero_vector, points, tags, t, 3)

    def species_at(self, points, tags, t):
        return self._eval(self.species, _zero_scalar, points, tags, t, 1)


@dataclass(frozen=True)
class TimeControls:
    cfl: float
    t_end: float
    snapshot_interval: float

    def __post_init__(self):
        if not self.cfl > 0:
            raise InvalidArgument("cfl must be positive")
        if not self.snapshot_interval > 0:
            raise InvalidArgument("snapshot_interval must be positive")
        if not self.t_end >= 0:
            raise InvalidArgument("t_end must be non-negative")


SourceTerm = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class ProjectionResult:
    delta: np.ndarray            # pressure increment on vertices
    boundary_flux: np.ndarray    # W~ . eta per boundary face
    residual: float


@dataclass
class SnapshotSet:
    times: np.ndarray
    momentum: np.ndarray         # (ns, nC, 3)
    pressure: np.ndarray         # (ns, nV)
    species: np.ndarray          # (ns, nC)

    def __len__(self):
        return len(self.times)

    def subset(self, index):
        return SnapshotSet(self.times[index], self.momentum[index],
                           self.pressure[index], self.species[index])

    def state(self, k):
        return FomState(self.momentum[k].copy(), self.pressure[k].copy(),
                        self.species[k].copy(), float(self.times[k]))


def rusanov_flux(wL, wR, uL, uR, normal):
    """Rusanov flux of the advected vector ``w`` through a facet.

    ``normal`` may carry the facet area (area vector); the result then is the
    integrated flux.  Arrays broadcast over leading dimensions.
    """
    wL, wR = np.asarray(wL, dtype=float), np.asarray(wR, dtype=float)
    unL = np.sum(np.asarray(uL) * normal, axis=-1)[..., None]
    unR = np.sum(np.asarray(uR) * normal, axis=-1)[..., None]
    s = np.maximum(np.abs(unL), np.abs(unR))
    return 0.5 * (unL * wL + unR * wR) - 0.5 * s * (wR - wL)


class FirstOrderReconstruction:
    """Facet states equal to the adjacent cell values.

    Higher order reconstructions (e.g. slope-limited extrapolation to the
    facet centroid) plug in here with the same call signature.
    """

    def __call__(self, dual: DualMesh, cell_values):
        return cell_values[dual.facet_left], cell_values[dual.facet_right]


def pressure_face_value(primal, face, pressure):
    """Pressure attached to ``face`` for each generating tet: the mean of the
    three face vertex values and the tet barycentre value."""
    p = np.asarray(pressure, dtype=float)
    on_face = p[primal.faces[face]].sum()
    out = []
    for t in primal.face_tets[face]:
        if t < 0:
            continue
        bary = p[primal.tets[t]].mean()
        out.append((on_face + bary) / 4.0)
    return np.array(out)


@functools.lru_cache(maxsize=8)
def assemble_poisson(primal):
    """P1 stiffness matrix ``int grad(phi_i) . grad(phi_j)`` (CSR, symmetric)."""
    g = primal.barycentric_gradients
    local = np.einsum("tij,tkj->tik", g, g) * primal.tet_volumes[:, None, None]
    rows = np.repeat(primal.tets, 4, axis=1).ravel()
    cols = np.tile(primal.tets, (1, 4)).ravel()
    a = sparse.csr_matrix((local.ravel(), (rows, cols)),
                          shape=(primal.n_vertices,) * 2)
    a.sum_duplicates()
    return ((a + a.T) * 0.5).tocsr()


@functools.lru_cache(maxsize=8)
def consistent_poisson(dual):
    """``sum_c G_c^T diag(1/|C|) G_c`` over interior cells: the operator whose
    solution makes the post-projection momentum discretely divergence free."""
    inner = dual.interior
    inv = sparse.diags(1.0 / dual.volumes[inner])
    lap = sum((G[inner].T @ inv @ G[inner]) for G in dual.cell_gradient_matrices)
    lap = lap.tocsr()
    return ((lap + lap.T) * 0.5).tocsr()


@functools.lru_cache(maxsize=8)
def boundary_load(dual):
    """``(nV, n_bf)`` matrix integrating a per-facet constant against the P1
    hat functions over each boundary face (area / 3 per vertex)."""
    pm = dual.primal
    bf = dual.bfacet_cell
    rows = pm.faces[bf].ravel()
    cols = np.repeat(np.arange(len(bf)), 3)
    area = np.linalg.norm(dual.bfacet_area, axis=1)
    return sparse.csr_matrix((np.repeat(area / 3.0, 3), (rows, cols)),
                             shape=(pm.n_vertices, len(bf)))


def cell_length_scale(dual):
    """``2 |C_i| / sum of facet areas``: the positivity limit of the explicit
    upwind update is ``dt |u| <= h`` with this length."""
    area = np.zeros(dual.n_cells)
    a = np.linalg.norm(dual.facet_area, axis=1)
    np.add.at(area, dual.facet_left, a)
    np.add.at(area, dual.facet_right, a)
    np.add.at(area, dual.bfacet_cell, np.linalg.norm(dual.bfacet_area, axis=1))
    return 2.0 * dual.volumes / area


class FomSolver:
    """Binds a dual mesh, physical data and the cached discrete operators.

    ``projection="consistent"`` (default) solves the pressure increment with
    the operator ``G^T |C|^-1 G`` assembled from the same cell-integrated P1
    gradients ``G`` that enter the momentum update, which makes the projected
    momentum discretely divergence free.  ``projection="stiffness"`` uses the
    standard P1 stiffness matrix instead.
    """

    def __init__(self, dual: DualMesh, params: FluidParams, bc: BoundaryConditions,
                 source: SourceTerm | None = None, *, projection="consistent",
                 tolerance=DEFAULT_TOLERANCE, reconstruction=None):
        if projection not in ("consistent", "stiffness"):
            raise InvalidArgument(f"unknown projection {projection!r}")
        bc.validate(dual)
        self.dual = dual
        self.primal = dual.primal
        self.params = params
        self.bc = bc
        self.source = source
        self.projection = projection
        self.tolerance = tolerance
        self.reconstruction = reconstruction or FirstOrderReconstruction()

        d = dual
        self.bcells = np.flatnonzero(d.boundary)
        self.bcell_tags = d.tags[self.bcells]
        self.bcell_points = d.nodes[self.bcells]
        # primal boundary faces are numbered like their dual cells
        bf_faces = d.bfacet_cell
        self.bf_tets = self.primal.face_tets[bf_faces, 0]
        self.h = cell_length_scale(d)

        area = np.linalg.norm(d.bfacet_area, axis=1)
        self.boundary_load = boundary_load(d)
        self.bf_normals = d.bfacet_area / area[:, None]
        self._factor = None

    # -- boundary data --------------------------------------------------------
    def impose_dirichlet(self, state: FomState, t):
        rho = self.params.rho
        state.momentum[self.bcells] = rho * self.bc.velocity_at(self.bcell_points, self.bcell_tags, t)
        if self.bc.species:
            state.species[self.bcells] = self.bc.species_at(self.bcell_points, self.bcell_tags, t)

    # -- stage 1 --------------------------------------------------------------
    def transport_diffusion_stage(self, state: FomState, dt):
        d, p = self.dual, self.params
        t = state.time
        W, Y = state.momentum, state.species
        u = W / p.rho
        w = np.column_stack([W, Y])

        wL, wR = self.reconstruction(d, w)
        uL, uR = wL[:, :3] / p.rho, wR[:, :3] / p.rho
        res = -(d.divergence_matrix @ rusanov_flux(wL, wR, uL, uR, d.facet_area))

        bc_ = self.bcells
        g = self.bc.velocity_at(d.bfacet_centroid, d.tags[d.bfacet_cell], t)
        wg = np.column_stack([p.rho * g, self.bc.species_at(d.bfacet_centroid, d.tags[d.bfacet_cell], t)
                              if self.bc.species else Y[d.bfacet_cell]])
        fb = rusanov_flux(w[d.bfacet_cell], wg, u[d.bfacet_cell], g, d.bfacet_area)
        res -= d.boundary_scatter @ fb

        if p.mu > 0 or p.diffusivity > 0:
            grad_u = d.face_gradients(u)                      # (nT, 3, 3)
            grad_y = d.face_gradients(Y)                      # (nT, 3)
            gu = grad_u[d.facet_tet]
            gy = grad_y[d.facet_tet]
            visc = np.column_stack([
                p.mu * np.einsum("fij,fj->fi", gu, d.facet_area),
                p.diffusivity * np.einsum("fj,fj->f", gy, d.facet_area)])
            res += d.divergence_matrix @ visc
            gub = grad_u[self.bf_tets]
            gyb = grad_y[self.bf_tets]
            viscb = np.column_stack([
                p.mu * np.einsum("fij,fj->fi", gub, d.bfacet_area),
                p.diffusivity * np.einsum("fj,fj->f", gyb, d.bfacet_area)])
            res += d.boundary_scatter @ viscb

        grad_p = np.column_stack([G @ state.pressure for G in d.cell_gradient_matrices])
        res[:, :3] -= grad_p

        new = w + dt * res / d.volumes[:, None]
        if self.source is not None:
            new[:, :3] += dt * self.source(d.nodes, t)
        out = FomState(new[:, :3].copy(), state.pressure.copy(), new[:, 3].copy(), t + dt)
        self.impose_dirichlet(out, t + dt)
        self._check_finite(out, t + dt)
        return out

    @staticmethod
    def _check_finite(state, t):
        bad = ~np.isfinite(state.momentum).all(axis=1) | ~np.isfinite(state.species)
        if bad.any():
            cell = int(np.flatnonzero(bad)[0])
            raise NumericalBlowup(f"non-finite state in cell {cell} at t={t:.6g}", cell=cell, time=t)

    # -- stage 2 --------------------------------------------------------------
    def divergence_functional(self, momentum):
        """``sum_i W_i . int_{C_i} grad(phi_v) - int_dOmega (W.eta) phi_v`` per vertex."""
        d = self.dual
        val = sum(G.T @ momentum[:, c] for c, G in enumerate(d.cell_gradient_matrices))
        flux = np.einsum("fj,fj->f", momentum[d.bfacet_cell], self.bf_normals)
        return val - self.boundary_load @ flux

    def divergence_residual(self, momentum):
        """Divergence functional normalised by the magnitude of its summands."""
        d = self.dual
        val = self.divergence_functional(momentum)
        mag = sum(abs(G).T @ np.abs(momentum[:, c]) for c, G in enumerate(d.cell_gradient_matrices))
        mag = mag + self.boundary_load @ np.linalg.norm(momentum[d.bfacet_cell], axis=1)
        scale = np.linalg.norm(mag)
        return float(np.linalg.norm(val) / scale) if scale > 0 else 0.0

    @functools.cached_property
    def projection_operator(self):
        if self.projection == "stiffness":
            return assemble_poisson(self.primal)
        return consistent_poisson(self.dual)

    def _solve(self, rhs):
        op = self.projection_operator
        if self._factor is None:
            self._factor = spla.splu(op[:-1, :-1].tocsc())
        delta = np.zeros(len(rhs))
        delta[:-1] = self._factor.solve(rhs[:-1])
        w = self.primal.lumped_mass
        delta -= np.dot(w, delta) / w.sum()
        if not np.all(np.isfinite(delta)):
            raise NumericalBlowup("non-finite pressure increment")
        res = np.linalg.norm(op @ delta - rhs)
        scale = np.linalg.norm(rhs)
        rel = res / scale if scale > 0 else res
        if not np.isfinite(rel) or rel > self.tolerance:
            raise SolverFailure(f"pressure solve residual {rel:.3e} exceeds {self.tolerance:.1e}")
        return delta, rel

    def projection_stage(self, momentum_tilde, dt):
        rhs = self.divergence_functional(momentum_tilde) / dt
        rhs = rhs - rhs.mean()
        delta, rel = self._solve(rhs)
        d = self.dual
        G = np.einsum("fj,fj->f", momentum_tilde[d.bfacet_cell], self.bf_normals)
        return ProjectionResult(delta, G, rel)

    # -- stage 3 --------------------------------------------------------------
    def post_projection(self, state_tilde: FomState, proj: ProjectionResult, dt):
        d = self.dual
        grad = np.column_stack([G @ proj.delta for G in d.cell_gradient_matrices])
        W = state_tilde.momentum.copy()
        inner = d.interior
        W[inner] -= dt * grad[inner] / d.volumes[inner, None]
        return FomState(W, state_tilde.pressure + proj.delta,
                        state_tilde.species, state_tilde.time)

    # -- time loop ------------------------------------------------------------
    def compute_dt(self, state: FomState, cfl):
        p = self.params
        speed = np.linalg.norm(state.momentum, axis=1) / p.rho
        nu = p.mu / p.rho + p.diffusivity
        h = self.h
        return float(cfl * np.min(h / (speed + VELOCITY_EPS + 2.0 * nu / h)))

    def step(self, state: FomState, dt):
        tilde = self.transport_diffusion_stage(state, dt)
        proj = self.projection_stage(tilde.momentum, dt)
        return self.post_projection(tilde, proj, dt), proj

    def run(self, state: FomState, controls: TimeControls, monitor=None):
        """Advance to ``controls.t_end`` recording snapshots at exact multiples
        of the snapshot interval.  Returns the :class:`SnapshotSet` and the
        per-step divergence residuals."""
        state = state.copy()
        self.impose_dirichlet(state, state.time)
        n_snap = int(np.floor(controls.t_end / controls.snapshot_interval + 1e-9))
        targets = [k * controls.snapshot_interval for k in range(1, n_snap + 1)]
        last = targets[-1] if targets else 0.0
        if controls.t_end - last > 1e-9 * controls.snapshot_interval:
            targets.append(controls.t_end)
        times, mom, pres, spec = [state.time], [state.momentum.copy()], \
            [state.pressure.copy()], [state.species.copy()]
        divergence = []
        for target in targets:
            while state.time < target:
                dt = self.compute_dt(state, controls.cfl)
                final = state.time + dt >= target - 1e-12 * max(1.0, target)
                if final:
                    dt = target - state.time
                try:
                    state, proj = self.step(state, dt)
                except (NumericalBlowup, SolverFailure) as exc:
                    raise type(exc)(f"{exc} (step from t={state.time:.6g})") from exc
                if final:
                    state.time = target
                divergence.append(self.divergence_residual(state.momentum))
                if monitor is not None:
                    monitor(state)
            times.append(state.time)
            mom.append(state.momentum.copy())
            pres.append(state.pressure.copy())
            spec.append(state.species.copy())
        snaps = SnapshotSet(np.array(times), np.array(mom), np.array(pres), np.array(spec))
        return snaps, np.array(divergence)


def run_fom(case, dual: DualMesh, controls: TimeControls, **solver_options):
    """Run ``case`` (see :mod:`hfvrom.cases`) on ``dual`` and return the
    snapshot set together with the per-step divergence residuals."""
    solver = FomSolver(dual, case.params, case.bc, case.source, **solver_options)
    state0 = case.initial_state(dual)
    log.info("FOM %s: %d cells, %d vertices", getattr(case, "name", "case"),
             dual.n_cells, dual.primal.n_vertices)
    return solver.run(state0, controls)
