"""On-disk formats.

Binary artifacts are little-endian: a 7-byte magic, a ``u32`` version, then
``u64`` counts and row-major ``f64`` arrays.  CSV tables print the shortest
round-trip representation of each float and ASCII VTK dumps use 17
significant digits, so reruns are byte-identical and values survive a
write/read cycle exactly.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .fom import SnapshotSet
from .pod import VARIABLES, PodBasis
from .rom import RomOperators

VERSION = 1
SNAPSHOT_MAGIC = b"HFVROM\0"
BASIS_MAGIC = b"HFVPOD\0"
OPERATORS_MAGIC = b"HFVOPS\0"
OPERATOR_ORDER = ("M", "B", "C", "K", "F", "N", "D", "H", "P", "G", "E", "Q")


def atomic_write(path, data: bytes):
    """Write ``data`` to a temporary file next to ``path`` and rename it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, data, what):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise InvalidArgument(f"truncated {self.what} file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self, k=1):
        vals = struct.unpack(f"<{k}Q", self.take(8 * k))
        return vals[0] if k == 1 else vals

    def f64(self, shape):
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(float).reshape(shape)

    def header(self, magic):
        if bytes(self.take(len(magic))) != magic:
            raise InvalidArgument(f"not a {self.what} file (bad magic)")
        version = self.u32()
        if version != VERSION:
            raise InvalidArgument(f"unsupported {self.what} file version {version}")

    def done(self):
        if self.pos != len(self.buf):
            raise InvalidArgument(f"trailing bytes in {self.what} file")


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _u64(*vals):
    return struct.pack(f"<{len(vals)}Q", *[int(v) for v in vals])


# -- snapshots ----------------------------------------------------------------

def encode_snapshots(snaps: SnapshotSet) -> bytes:
    ns, nc = snaps.momentum.shape[:2]
    nv = snaps.pressure.shape[1]
    out = io.BytesIO()
    out.write(SNAPSHOT_MAGIC + struct.pack("<I", VERSION) + _u64(nc, nv, ns))
    for k in range(ns):
        out.write(_f64([snaps.times[k]]))
        out.write(_f64(snaps.momentum[k]))
        out.write(_f64(snaps.pressure[k]))
        out.write(_f64(snaps.species[k]))
    return out.getvalue()


def decode_snapshots(data: bytes) -> SnapshotSet:
    r = _Reader(data, "snapshot")
    r.header(SNAPSHOT_MAGIC)
    nc, nv, ns = r.u64(3)
    times, mom, pres, spec = [], [], [], []
    for _ in range(ns):
        times.append(r.f64(1)[0])
        mom.append(r.f64((nc, 3)))
        pres.append(r.f64(nv))
        spec.append(r.f64(nc))
    r.done()
    return SnapshotSet(np.array(times), np.array(mom).reshape(ns, nc, 3),
                       np.array(pres).reshape(ns, nv), np.array(spec).reshape(ns, nc))


def write_snapshots(path, snaps):
    atomic_write(path, encode_snapshots(snaps))


def read_snapshots(path):
    return decode_snapshots(Path(path).read_bytes())


# -- bases ----------------------------------------------------------------------

def encode_basis(basis: PodBasis) -> bytes:
    shape = basis.modes.shape[1:]
    npts = shape[0]
    ncomp = shape[1] if len(shape) > 1 else 1
    ns = len(basis.eigenvalues)
    xi = basis.eigenvectors if basis.eigenvectors is not None else np.zeros((ns, 0))
    out = io.BytesIO()
    out.write(BASIS_MAGIC + struct.pack("<I", VERSION))
    out.write(struct.pack("<I", VARIABLES.index(basis.variable)))
    out.write(_u64(npts, ncomp, len(shape), ns, basis.n_modes, xi.shape[1],
                   basis.lifting is not None))
    out.write(_f64(basis.eigenvalues))
    out.write(_f64(basis.cumulative_energies))
    out.write(_f64(xi))
    out.write(_f64(basis.coefficients))
    if basis.lifting is not None:
        out.write(_f64(basis.lifting))
    out.write(_f64(basis.modes))
    return out.getvalue()


def decode_basis(data: bytes) -> PodBasis:
    r = _Reader(data, "basis")
    r.header(BASIS_MAGIC)
    tag = r.u32()
    if tag >= len(VARIABLES):
        raise InvalidArgument(f"unknown variable tag {tag} in basis file")
    npts, ncomp, ndim, ns, nmodes, nxi, has_lift = r.u64(7)
    shape = (npts,) if ndim == 1 else (npts, ncomp)
    lam = r.f64(ns)
    cum = r.f64(ns)
    xi = r.f64((ns, nxi))
    coef = r.f64((ns, nmodes))
    lift = r.f64(shape) if has_lift else None
    modes = r.f64((nmodes,) + shape)
    r.done()
    return PodBasis(VARIABLES[tag], modes, lam, cum, coef, lift, xi)


def write_basis(path, basis):
    atomic_write(path, encode_basis(basis))


def read_basis(path):
    return decode_basis(Path(path).read_bytes())


# -- operators ------------------------------------------------------------------

def encode_operators(ops: RomOperators) -> bytes:
    n, npi, ny = ops.dims
    nb = len(ops.b_points)
    nf = ops.n_dissipation_facets
    tags = sorted(set(ops.b_tags.tolist()))
    out = io.BytesIO()
    out.write(OPERATORS_MAGIC + struct.pack("<I", VERSION))
    out.write(_u64(n, npi, ny, nb, nf))
    for name in OPERATOR_ORDER:
        out.write(_f64(ops.g_weights if name == "G" else getattr(ops, name)))
    out.write(_f64(ops.m_weights))
    out.write(_f64(ops.b_points))
    out.write(_u64(len(tags)))
    for tag in tags:
        raw = tag.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
    out.write(np.array([tags.index(t) for t in ops.b_tags], dtype="<u4").tobytes())
    for arr in (ops.diss_u_left, ops.diss_u_right, ops.diss_test_momentum,
                ops.diss_jump_momentum, ops.diss_test_pressure, ops.diss_test_species,
                ops.diss_jump_species):
        out.write(_f64(arr))
    return out.getvalue()


def decode_operators(data: bytes) -> RomOperators:
    r = _Reader(data, "operators")
    r.header(OPERATORS_MAGIC)
    n, npi, ny, nb, nf = r.u64(5)
    shapes = {"M": (n, n), "B": (n, n), "C": (n, n, n), "K": (n, npi), "F": (n, n),
              "N": (npi, npi), "D": (npi, n, n), "H": (npi, n), "P": (npi, n),
              "G": (npi, nb, 3), "E": (ny, n, ny), "Q": (ny, ny)}
    arrays = {name: r.f64(shapes[name]) for name in OPERATOR_ORDER}
    m_weights = r.f64((n, nb, 3))
    b_points = r.f64((nb, 3))
    ntags = r.u64()
    tags = []
    for _ in range(ntags):
        size = r.u32()
        tags.append(bytes(r.take(size)).decode("utf-8"))
    idx = np.frombuffer(r.take(4 * nb), dtype="<u4")
    if nb and (idx.max(initial=0) >= max(ntags, 1) or not tags):
        raise InvalidArgument("bad boundary tag index in operators file")
    b_tags = np.array([tags[i] for i in idx], dtype=str) if nb else np.zeros(0, dtype=str)
    diss = (r.f64((nf, n)), r.f64((nf, n)), r.f64((n, nf, 3)), r.f64((n, nf, 3)),
            r.f64((npi, nf, 3)), r.f64((ny, nf)), r.f64((ny, nf)))
    r.done()
    return RomOperators(arrays["M"], arrays["B"], arrays["C"], arrays["K"], arrays["F"],
                        arrays["N"], arrays["D"], arrays["H"], arrays["P"], arrays["E"],
                        arrays["Q"], arrays["G"], m_weights, b_points, b_tags, *diss)


def write_operators(path, ops):
    atomic_write(path, encode_operators(ops))


def read_operators(path):
    return decode_operators(Path(path).read_bytes())


# -- text outputs -----------------------------------------------------------------

def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def csv_text(header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def coefficient_csv(states, n, npi, ny):
    header = (["t"] + [f"a_{i + 1}" for i in range(n)] + [f"b_{i + 1}" for i in range(npi)]
              + [f"c_{i + 1}" for i in range(ny)])
    rows = [[s.time, *s.a, *s.b, *s.c] for s in states]
    return csv_text(header, rows)


def eigenvalue_csv(bases):
    """One row per eigenvalue index: eigenvalue and cumulative energy of each
    variable (columns left empty past a variable's snapshot count)."""
    header = ["i"]
    for b in bases:
        header += [f"lambda_{b.variable}", f"cumulative_{b.variable}"]
    rows = []
    for i in range(max(len(b.eigenvalues) for b in bases)):
        row = [i + 1]
        for b in bases:
            if i < len(b.eigenvalues):
                row += [b.eigenvalues[i], b.cumulative_energies[i]]
            else:
                row += [None, None]
        rows.append(row)
    return csv_text(header, rows)


def vtk_text(dual, state, title="hfvrom field"):
    """Legacy ASCII unstructured grid of the primal mesh.

    Pressure is a vertex field.  Momentum and species live on dual nodes;
    they are written as per-tet means (cell data) and as volume-weighted
    vertex averages of the incident dual cells (point data).
    """
    pm = dual.primal
    nv, nt = pm.n_vertices, pm.n_tets
    vol_w = np.zeros(nv)
    mom_v = np.zeros((nv, 3))
    spe_v = np.zeros(nv)
    tri = pm.faces
    for k in range(3):
        np.add.at(vol_w, tri[:, k], dual.volumes)
        np.add.at(mom_v, tri[:, k], dual.volumes[:, None] * state.momentum)
        np.add.at(spe_v, tri[:, k], dual.volumes * state.species)
    mom_v /= vol_w[:, None]
    spe_v /= vol_w
    mom_t = state.momentum[pm.tet_faces].mean(axis=1)
    spe_t = state.species[pm.tet_faces].mean(axis=1)
    g = lambda x: "%.17g" % x  # noqa: E731
    lines = ["# vtk DataFile Version 3.0", f"{title} t={g(state.time)}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [" ".join(g(c) for c in p) for p in pm.vertices]
    lines.append(f"CELLS {nt} {5 * nt}")
    lines += ["4 " + " ".join(str(int(i)) for i in t) for t in pm.tets]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["10"] * nt
    lines += [f"POINT_DATA {nv}", "SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [g(v) for v in state.pressure]
    lines.append("VECTORS momentum double")
    lines += [" ".join(g(c) for c in v) for v in mom_v]
    lines += ["SCALARS species double 1", "LOOKUP_TABLE default"]
    lines += [g(v) for v in spe_v]
    lines += [f"CELL_DATA {nt}", "VECTORS momentum double"]
    lines += [" ".join(g(c) for c in v) for v in mom_t]
    lines += ["SCALARS species double 1", "LOOKUP_TABLE default"]
    lines += [g(v) for v in spe_t]
    return "\n".join(lines) + "\n"


def write_vtk(path, dual, state, title="hfvrom field"):
    atomic_write_text(path, vtk_text(dual, state, title))
