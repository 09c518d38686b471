"""End-to-end protocol: FOM run, POD bases, reduced operators, ROM run and
error comparison.

Each stage is available as an in-memory function and as a file-backed
runner that reads its inputs from, and writes its artifacts to, the run's
output directory.  Running the file-backed stages in sequence yields the same
bytes as :func:`run_pipeline`.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import formats
from .cases import CavityCase, ManufacturedCase, relative_error
from .config import RunConfig
from .errors import ConfigError, HfvError, InvalidArgument
from .fom import FluidParams, TimeControls, run_fom
from .mesh import build_cube_primal, build_dual, read_mesh, write_mesh
from .pod import (InnerProductSpace, build_basis, build_lifted_basis, build_source_basis,
                  projection_coefficients)
from .rom import (ReducedModel, RomState, assemble_operators, facet_speeds,
                  project_initial, reconstruct)

log = logging.getLogger(__name__)

ERROR_HEADER = ("t", "err_rom_wu", "err_proj_wu", "err_rom_pi", "err_proj_pi",
                "err_rom_wy", "err_proj_wy")
FILES = {
    "mesh": "mesh.hfm",
    "snapshots": "snapshots.hfv",
    "momentum": "basis_momentum.hfp",
    "pressure": "basis_pressure.hfp",
    "species": "basis_species.hfp",
    "eigenvalues": "eigenvalues.csv",
    "operators": "operators.hfo",
    "coefficients": "coefficients.csv",
    "errors": "errors.csv",
}


@contextlib.contextmanager
def stage(label):
    """Prefix errors escaping the block with the stage name."""
    try:
        yield
    except HfvError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = label
            exc.args = (f"[{label}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


# -- configuration to objects --------------------------------------------------------

def make_run_case(cfg: RunConfig):
    controls = TimeControls(cfl=cfg.cfl, t_end=cfg.t_end, snapshot_interval=cfg.snapshot_interval)
    if cfg.case == "manufactured":
        if cfg.rho != 1.0:
            raise ConfigError("the manufactured source assumes rho = 1", key="rho")
        case = ManufacturedCase(mu=cfg.mu, controls=controls, kappa=dict(cfg.kappa))
        case.self_check()
        return case
    case = CavityCase(mu=cfg.mu, diffusivity=cfg.diffusivity, controls=controls,
                      kappa=dict(cfg.kappa))
    case.params = FluidParams(rho=cfg.rho, mu=cfg.mu, diffusivity=cfg.diffusivity)
    return case


def build_mesh(n):
    return build_dual(build_cube_primal(n))


def training(snaps):
    """Snapshots used for POD and operator assembly: every recorded state
    after the initial condition."""
    return snaps.subset(slice(1, None))


# -- stages --------------------------------------------------------------------------

def fom_stage(cfg: RunConfig, case, dual):
    with stage("fom-run"):
        return run_fom(case, dual, case.controls, tolerance=cfg.tolerance)


def pod_stage(case, dual, snaps):
    train = training(snaps)
    if len(train) == 0:
        raise InvalidArgument("no training snapshots after the initial state")
    fv = InnerProductSpace.fv(dual)
    fe = InnerProductSpace.fe(dual.primal)
    kappa = case.kappa
    with stage("pod-build"):
        bases = {}
        if case.lifting:
            bases["momentum"] = build_lifted_basis(fv, train.momentum, kappa["momentum"],
                                                   "momentum")
        else:
            bases["momentum"] = build_basis(fv, train.momentum, kappa["momentum"], "momentum")
        bases["pressure"] = build_basis(fe, train.pressure, kappa["pressure"], "pressure")
        if case.species:
            bases["species"] = build_basis(fv, train.species, kappa["species"], "species")
    return bases


def _functions(dual, bases):
    phi = bases["momentum"].functions()
    psi = bases["pressure"].functions()
    chi = bases["species"].functions() if "species" in bases else np.zeros((0, dual.n_cells))
    return phi, psi, chi


def offline_stage(cfg: RunConfig, case, dual, snaps, bases):
    train = training(snaps)
    phi, psi, chi = _functions(dual, bases)
    with stage("rom-offline"):
        source = None
        if case.source is not None:
            src = case.source_snapshots(dual, train.times)
            source = build_source_basis(bases["momentum"], src).modes
        speeds = None
        if cfg.dissipation == "frozen":
            speeds = facet_speeds(dual, train.momentum, case.params.rho).mean(axis=0)
        return assemble_operators(dual, phi, psi, chi, source, case.params,
                                  method=cfg.method, dissipation=cfg.dissipation, speeds=speeds)


def online_stage(cfg: RunConfig, case, dual, snaps, bases, ops, *, ablate=None):
    """ROM trajectory started from the projected first training snapshot and
    reported at every later snapshot time."""
    ablate = cfg.ablate_pressure if ablate is None else ablate
    train = training(snaps)
    phi, psi, chi = _functions(dual, bases)
    with stage("rom-run"):
        model = ReducedModel(ops.ablated() if ablate else ops, case.bc)
        state0 = project_initial(train.state(0), dual, phi, psi, chi, ops.M)
        return model.run(state0, train.times, cfg.dt_divisor)


@dataclass
class ErrorReport:
    times: np.ndarray
    columns: dict

    def mean(self, name):
        return float(np.mean(self.columns[name]))

    def to_csv(self):
        rows = []
        for k, t in enumerate(self.times):
            rows.append([t] + [self.columns[c][k] if c in self.columns else None
                               for c in ERROR_HEADER[1:]])
        return formats.csv_text(ERROR_HEADER, rows)


def compare_stage(dual, snaps, bases, states):
    train = training(snaps)
    if len(states) != len(train):
        raise InvalidArgument(f"{len(states)} ROM states for {len(train)} snapshots")
    fv = InnerProductSpace.fv(dual)
    fe = InnerProductSpace.fe(dual.primal)
    plan = [("wu", "momentum", fv, train.momentum, "a"),
            ("pi", "pressure", fe, train.pressure, "b")]
    if "species" in bases:
        plan.append(("wy", "species", fv, train.species, "c"))
    columns = {}
    with stage("compare"):
        for tag, var, space, ref, attr in plan:
            basis = bases[var]
            rom_err, proj_err = [], []
            for k, st in enumerate(states):
                rom_err.append(relative_error(space, basis.reconstruct(getattr(st, attr)), ref[k]))
                proj = basis.reconstruct(projection_coefficients(space, basis, ref[k]))
                proj_err.append(relative_error(space, proj, ref[k]))
            columns[f"err_rom_{tag}"] = np.array(rom_err)
            columns[f"err_proj_{tag}"] = np.array(proj_err)
    return ErrorReport(np.asarray(train.times), columns)


# -- artifacts -------------------------------------------------------------------------

def _dump_indices(times, dump_times):
    out = []
    for t in dump_times:
        k = int(np.argmin(np.abs(np.asarray(times) - t)))
        if k not in out:
            out.append(k)
    return out


def _dump_name(prefix, t):
    return f"{prefix}_t{t:.4f}.vtk"


def write_fom_dumps(out, cfg, dual, snaps):
    for k in _dump_indices(snaps.times, cfg.dump_times):
        formats.write_vtk(out / _dump_name("fom", snaps.times[k]), dual, snaps.state(k),
                          title="full order")


def write_rom_dumps(out, cfg, dual, bases, states, prefix="rom"):
    phi, psi, chi = _functions(dual, bases)
    times = [s.time for s in states]
    for k in _dump_indices(times, cfg.dump_times):
        field = reconstruct(states[k], phi, psi, chi)
        formats.write_vtk(out / _dump_name(prefix, times[k]), dual, field, title="reduced order")


def coefficient_text(states, bases):
    n = bases["momentum"].size
    npi = bases["pressure"].size
    ny = bases["species"].size if "species" in bases else 0
    return formats.coefficient_csv(states, n, npi, ny)


def read_coefficients(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("t"):
        raise InvalidArgument(f"{path} is not a coefficient table")
    header = lines[0].split(",")
    groups = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in "abc"}
    states = []
    for line in lines[1:]:
        vals = np.array([float(v) for v in line.split(",")])
        states.append(RomState(vals[groups["a"]], vals[groups["b"]], vals[groups["c"]],
                               float(vals[0])))
    return states


def _path(out, key):
    return Path(out) / FILES[key]


def load_mesh(out, n):
    path = _path(out, "mesh")
    if path.exists():
        return build_dual(read_mesh(path))
    return build_mesh(n)


def load_bases(out):
    bases = {}
    for var in ("momentum", "pressure", "species"):
        path = _path(out, var)
        if path.exists():
            bases[var] = formats.read_basis(path)
    for var in ("momentum", "pressure"):
        if var not in bases:
            raise InvalidArgument(f"missing basis file {_path(out, var)}")
    return bases


def run_mesh_gen(n, path):
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    primal = build_cube_primal(n)
    write_mesh(primal, path)
    return primal


def run_fom_files(cfg, out=None, snapshots=None):
    out = Path(out or cfg.output)
    case = make_run_case(cfg)
    mesh_path = _path(out, "mesh")
    run_mesh_gen(cfg.n, mesh_path)
    dual = build_dual(read_mesh(mesh_path))
    snaps, divergence = fom_stage(cfg, case, dual)
    formats.write_snapshots(snapshots or _path(out, "snapshots"), snaps)
    write_fom_dumps(out, cfg, dual, snaps)
    return snaps, divergence


def run_pod_files(cfg, snapshots=None, out=None):
    out = Path(out or cfg.output)
    case = make_run_case(cfg)
    dual = load_mesh(out, cfg.n)
    snaps = formats.read_snapshots(snapshots or _path(out, "snapshots"))
    bases = pod_stage(case, dual, snaps)
    for var, basis in bases.items():
        formats.write_basis(_path(out, var), basis)
    formats.atomic_write_text(_path(out, "eigenvalues"), formats.eigenvalue_csv(list(bases.values())))
    return bases


def run_offline_files(cfg, snapshots=None, out=None):
    out = Path(out or cfg.output)
    case = make_run_case(cfg)
    dual = load_mesh(out, cfg.n)
    snaps = formats.read_snapshots(snapshots or _path(out, "snapshots"))
    ops = offline_stage(cfg, case, dual, snaps, load_bases(out))
    formats.write_operators(_path(out, "operators"), ops)
    return ops


def run_online_files(cfg, snapshots=None, out=None, *, ablate=None, suffix=""):
    out = Path(out or cfg.output)
    case = make_run_case(cfg)
    dual = load_mesh(out, cfg.n)
    snaps = formats.read_snapshots(snapshots or _path(out, "snapshots"))
    bases = load_bases(out)
    ops = formats.read_operators(_path(out, "operators"))
    states = online_stage(cfg, case, dual, snaps, bases, ops, ablate=ablate)
    coef = _path(out, "coefficients").with_name(f"coefficients{suffix}.csv")
    formats.atomic_write_text(coef, coefficient_text(states, bases))
    write_rom_dumps(out, cfg, dual, bases, states, prefix=f"rom{suffix}")
    return states


def run_compare_files(cfg, snapshots=None, out=None, *, ablate=False):
    """Error report of the stored ROM trajectory, or of a fresh run with the
    pressure coupling removed when ``ablate`` is set."""
    out = Path(out or cfg.output)
    dual = load_mesh(out, cfg.n)
    snaps = formats.read_snapshots(snapshots or _path(out, "snapshots"))
    bases = load_bases(out)
    if ablate:
        states = run_online_files(cfg, snapshots, out, ablate=True, suffix="_ablated")
        target = _path(out, "errors").with_name("errors_ablated.csv")
    else:
        states = read_coefficients(_path(out, "coefficients"))
        target = _path(out, "errors")
    report = compare_stage(dual, snaps, bases, states)
    formats.atomic_write_text(target, report.to_csv())
    return report


def run_pipeline(cfg: RunConfig, out=None):
    """Every stage in sequence, writing all artifacts; returns the
    :class:`ErrorReport`."""
    out = Path(out or cfg.output)
    run_fom_files(cfg, out=out)
    run_pod_files(cfg, out=out)
    run_offline_files(cfg, out=out)
    run_online_files(cfg, out=out)
    return run_compare_files(cfg, out=out)


def config_for(case, n, **overrides):
    """:class:`RunConfig` with a case's default thresholds and times."""
    from .config import parse_config
    cfg = parse_config(f"[case]\ncase = {case}\nn = {n}\n")
    return replace(cfg, **overrides)
