"""Verification cases and error metrics.

``manufactured`` uses the divergence-free field

    u = (sin(pi t y) cos(pi t z), -cos(pi t z), exp(-2 pi t^2 x)),
    p = t cos(pi (x + y + z)),

for which the analytic momentum source below balances the incompressible
Navier-Stokes equations with rho = 1, mu = 1e-2.  ``cavity`` is the lid-driven
cube with a species ball released at the centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, ZeroReference
from .fom import BoundaryConditions, FluidParams, FomState, TimeControls
from .mesh import CUBE_SIDES

PI = np.pi


def manufactured_fields(x, t, mu=1e-2):
    """Exact velocity, pressure, source, boundary data and its time derivative
    at points ``x`` (shape ``(m, 3)``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    sy, cy = np.sin(PI * t * Y), np.cos(PI * t * Y)
    sz, cz = np.sin(PI * t * Z), np.cos(PI * t * Z)
    ex = np.exp(-2 * PI * t**2 * X)
    sxyz = np.sin(PI * (X + Y + Z))

    u = np.column_stack([sy * cz, -cz, ex])
    p = t * np.cos(PI * (X + Y + Z))
    f1 = (PI * Y * cy * cz - PI * Z * sy * sz + 2 * PI**2 * t**2 * mu * sy * cz
          - PI * t * cy * cz**2 - PI * t * sy * sz * ex - t * PI * sxyz)
    f2 = PI * Z * sz - PI**2 * t**2 * mu * cz + PI * t * sz * ex - t * PI * sxyz
    f3 = (-4 * PI**2 * t**4 * mu * ex - 4 * PI * t * X * ex - t * PI * sxyz
          - 2 * PI * t**2 * sy * ex * cz)
    f = np.column_stack([f1, f2, f3])
    u_t = np.column_stack([PI * Y * cy * cz - PI * Z * sy * sz,
                           PI * Z * sz,
                           -4 * PI * t * X * ex])
    return u, p, f, u.copy(), u_t


def manufactured_velocity_dt(x, t):
    """Time derivative of the manufactured velocity."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    sy, cy = np.sin(PI * t * Y), np.cos(PI * t * Y)
    sz, cz = np.sin(PI * t * Z), np.cos(PI * t * Z)
    ex = np.exp(-2 * PI * t**2 * X)
    return np.column_stack([PI * Y * cy * cz - PI * Z * sy * sz,
                            PI * Z * sz,
                            -4 * PI * t * X * ex])


def manufactured_residual(x, t, mu=1e-2):
    """Momentum residual ``du/dt + div(u (x) u) + grad p - mu lap u - f`` and
    ``div u`` evaluated from symbolic derivatives of the exact fields; the
    printed source enters only through :func:`manufactured_fields`."""
    import sympy as sp

    xs, ys, zs, ts = sp.symbols("x y z t")
    pi = sp.pi
    u = [sp.sin(pi * ts * ys) * sp.cos(pi * ts * zs), -sp.cos(pi * ts * zs),
         sp.exp(-2 * pi * ts**2 * xs)]
    p = ts * sp.cos(pi * (xs + ys + zs))
    X = (xs, ys, zs)
    lhs = [sp.diff(u[l], ts) + sum(sp.diff(u[l] * u[m], X[m]) for m in range(3))
           + sp.diff(p, X[l]) - mu * sum(sp.diff(u[l], X[m], 2) for m in range(3))
           for l in range(3)]
    div = sum(sp.diff(u[m], X[m]) for m in range(3))
    fn = sp.lambdify((xs, ys, zs, ts), lhs + [div], "numpy")
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    vals = fn(x[:, 0], x[:, 1], x[:, 2], t)
    vals = [np.broadcast_to(v, (len(x),)) for v in vals]
    lhs = np.column_stack(vals[:3])
    f = np.vstack([manufactured_fields(x[k:k + 1], t[k], mu)[2] for k in range(len(x))])
    return lhs - f, np.asarray(vals[3])


@dataclass
class Case:
    name: str
    params: FluidParams
    bc: BoundaryConditions
    controls: TimeControls
    kappa: dict
    source: object = None
    lifting: bool = False
    species: bool = False
    extra: dict = field(default_factory=dict)

    def initial_state(self, dual):
        raise NotImplementedError

    def source_snapshots(self, dual, times):
        if self.source is None:
            return None
        return np.array([self.source(dual.nodes, t) for t in times])

    def self_check(self):
        pass


class ManufacturedCase(Case):
    def __init__(self, mu=1e-2, controls=None, kappa=None):
        params = FluidParams(rho=1.0, mu=mu, diffusivity=0.0)

        def g(x, t):
            return manufactured_fields(x, t, mu)[0]

        g_t = manufactured_velocity_dt

        def source(x, t):
            return manufactured_fields(x, t, mu)[2]

        bc = BoundaryConditions({s: g for s in CUBE_SIDES}, {s: g_t for s in CUBE_SIDES})
        super().__init__(
            name="manufactured", params=params, bc=bc,
            controls=controls or TimeControls(cfl=1.0, t_end=2.5, snapshot_interval=0.01),
            kappa=kappa or {"momentum": 0.99999, "pressure": 0.9999},
            source=source, lifting=False, species=False)

    def exact(self, x, t):
        u, p, *_ = manufactured_fields(x, t, self.params.mu)
        return self.params.rho * u, p

    def initial_state(self, dual):
        t0 = 0.0
        u, _ = self.exact(dual.nodes, t0)
        _, p = self.exact(dual.primal.vertices, t0)
        return FomState(u, p, np.zeros(dual.n_cells), t0)

    def self_check(self, n_points=1000, seed=0, tol=1e-10):
        rng = np.random.default_rng(seed)
        x = rng.random((n_points, 3))
        t = rng.random(n_points) * self.controls.t_end
        res, div = manufactured_residual(x, t, self.params.mu)
        worst = max(np.abs(res).max(), np.abs(div).max())
        if worst > tol:
            raise InvalidArgument(f"manufactured source inconsistent: residual {worst:.3e}")
        return worst


class CavityCase(Case):
    BALL_CENTER = np.array([0.5, 0.5, 0.5])
    BALL_RADIUS_SQ = 1e-2
    BALL_VALUE = 10.0

    def __init__(self, mu=1e-2, diffusivity=1e-2, controls=None, kappa=None):
        params = FluidParams(rho=1.0, mu=mu, diffusivity=diffusivity)

        def lid(x, t):
            out = np.zeros((len(x), 3))
            out[:, 0] = 1.0
            return out

        def wall(x, t):
            return np.zeros((len(x), 3))

        def zero(x, t):
            return np.zeros(len(x))

        velocity = {s: wall for s in CUBE_SIDES}
        velocity["top"] = lid
        bc = BoundaryConditions(velocity, {}, {s: zero for s in CUBE_SIDES})
        super().__init__(
            name="cavity", params=params, bc=bc,
            controls=controls or TimeControls(cfl=1.0, t_end=5.0, snapshot_interval=0.01),
            kappa=kappa or {"momentum": 0.9999, "pressure": 0.99, "species": 0.9999},
            source=None, lifting=True, species=True)

    def initial_species(self, x):
        r2 = np.sum((np.asarray(x) - self.BALL_CENTER) ** 2, axis=1)
        return np.where(r2 <= self.BALL_RADIUS_SQ, self.BALL_VALUE, 0.0)

    def initial_state(self, dual):
        return FomState(np.zeros((dual.n_cells, 3)), np.zeros(dual.primal.n_vertices),
                        self.initial_species(dual.nodes), 0.0)


def make_case(name, **kwargs):
    if name == "manufactured":
        return ManufacturedCase(**kwargs)
    if name == "cavity":
        return CavityCase(**kwargs)
    raise InvalidArgument(f"unknown case {name!r}")


def relative_error(space, field, reference):
    """``||field - reference|| / ||reference||`` in the inner product of ``space``."""
    ref = space.norm(reference)
    if ref == 0.0:
        raise ZeroReference("reference field has zero norm")
    return space.norm(np.asarray(field) - np.asarray(reference)) / ref
