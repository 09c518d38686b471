import os
import struct

import numpy as np
import pytest

from hfvrom import formats
from hfvrom.errors import InvalidArgument
from hfvrom.fom import FomState, SnapshotSet
from hfvrom.pod import InnerProductSpace, build_basis, build_lifted_basis
from hfvrom.rom import RomState, assemble_operators
from hfvrom.fom import FluidParams


def _snaps(dual, rng, ns=3):
    nc, nv = dual.n_cells, dual.primal.n_vertices
    return SnapshotSet(np.arange(ns) * 0.01, rng.normal(size=(ns, nc, 3)),
                       rng.normal(size=(ns, nv)), rng.normal(size=(ns, nc)))


def test_snapshot_layout_matches_hand_packed_bytes(dual1, rng):
    s = _snaps(dual1, rng, 2)
    nc, nv = dual1.n_cells, dual1.primal.n_vertices
    ref = b"HFVROM\0" + struct.pack("<I", 1) + struct.pack("<3Q", nc, nv, 2)
    for k in range(2):
        ref += struct.pack("<d", s.times[k])
        ref += struct.pack(f"<{3 * nc}d", *s.momentum[k].ravel())
        ref += struct.pack(f"<{nv}d", *s.pressure[k])
        ref += struct.pack(f"<{nc}d", *s.species[k])
    assert formats.encode_snapshots(s) == ref


def test_snapshot_round_trip(dual2, rng, tmp_path):
    s = _snaps(dual2, rng)
    path = tmp_path / "s.hfv"
    formats.write_snapshots(path, s)
    back = formats.read_snapshots(path)
    for name in ("times", "momentum", "pressure", "species"):
        assert np.array_equal(getattr(back, name), getattr(s, name))
    assert formats.encode_snapshots(back) == path.read_bytes()
    assert os.stat(path).st_mode & 0o777 == 0o644


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
def test_corrupt_snapshot_files_rejected(dual1, rng, mutate):
    data = bytearray(formats.encode_snapshots(_snaps(dual1, rng)))
    if mutate == "magic":
        data[0:1] = b"X"
    elif mutate == "version":
        data[7:11] = struct.pack("<I", 2)
    elif mutate == "truncate":
        data = data[:-5]
    else:
        data += b"\0"
    with pytest.raises(InvalidArgument):
        formats.decode_snapshots(bytes(data))


def test_basis_round_trip(dual2, rng):
    fv = InnerProductSpace.fv(dual2)
    fe = InnerProductSpace.fe(dual2.primal)
    W = rng.normal(size=(6, dual2.n_cells, 3)) + 1.0
    bases = [build_lifted_basis(fv, W, 0.99),
             build_basis(fe, rng.normal(size=(6, dual2.primal.n_vertices)), 0.9, "pressure"),
             build_basis(fv, rng.normal(size=(6, dual2.n_cells)), 0.9, "species")]
    for b in bases:
        data = formats.encode_basis(b)
        assert data.startswith(b"HFVPOD\0" + struct.pack("<I", 1))
        back = formats.decode_basis(data)
        assert back.variable == b.variable
        assert np.array_equal(back.modes, b.modes)
        assert np.array_equal(back.eigenvalues, b.eigenvalues)
        assert np.array_equal(back.cumulative_energies, b.cumulative_energies)
        assert np.array_equal(back.coefficients, b.coefficients)
        assert (back.lifting is None) == (b.lifting is None)
        if b.lifting is not None:
            assert np.array_equal(back.lifting, b.lifting)
        assert formats.encode_basis(back) == data
    with pytest.raises(InvalidArgument):
        formats.decode_basis(formats.encode_basis(bases[1])[:-8])


def test_operators_round_trip(dual2, rng):
    n, npi, ny = 3, 2, 2
    phi = rng.normal(size=(n, dual2.n_cells, 3))
    psi = rng.normal(size=(npi, dual2.primal.n_vertices))
    chi = rng.normal(size=(ny, dual2.n_cells))
    ops = assemble_operators(dual2, phi, psi, chi, rng.normal(size=phi.shape),
                             FluidParams(1.0, 0.01, 0.01))
    data = formats.encode_operators(ops)
    assert data[:7] == b"HFVOPS\0"
    assert struct.unpack("<3Q", data[11:35]) == (n, npi, ny)
    # the first array after the header is M, row-major
    nb_off = 11 + 5 * 8
    assert np.array_equal(np.frombuffer(data[nb_off:nb_off + 8 * n * n], "<f8"),
                          ops.M.ravel())
    back = formats.decode_operators(data)
    for name in formats.OPERATOR_ORDER:
        if name != "G":
            assert np.array_equal(getattr(back, name), getattr(ops, name)), name
    assert np.array_equal(back.g_weights, ops.g_weights)
    assert np.array_equal(back.b_tags, ops.b_tags)
    assert formats.encode_operators(back) == data
    with pytest.raises(InvalidArgument):
        formats.decode_operators(data[:100])


def test_csv_outputs():
    states = [RomState(np.array([1.0, 0.1]), np.array([0.03]), np.zeros(0), 0.01)]
    text = formats.coefficient_csv(states, 2, 1, 0)
    assert text == "t,a_1,a_2,b_1\n0.01,1.0,0.1,0.03\n"
    assert formats.csv_text(["x", "y"], [[1, None], [2.0, 0.5]]) == "x,y\n1,\n2.0,0.5\n"


def test_eigenvalue_csv(dual2, rng):
    fv = InnerProductSpace.fv(dual2)
    a = build_basis(fv, rng.normal(size=(4, dual2.n_cells)), 0.9, "species")
    b = build_basis(fv, rng.normal(size=(3, dual2.n_cells, 3)), 0.9, "momentum")
    lines = formats.eigenvalue_csv([a, b]).splitlines()
    assert lines[0] == "i,lambda_species,cumulative_species,lambda_momentum,cumulative_momentum"
    assert len(lines) == 5
    assert lines[-1].startswith("4,") and lines[-1].endswith(",,")
    assert float(lines[4].split(",")[2]) == pytest.approx(1.0, abs=1e-12)


def test_vtk_structure(dual1, rng):
    state = FomState(rng.normal(size=(dual1.n_cells, 3)), rng.normal(size=8),
                     rng.normal(size=dual1.n_cells), 0.25)
    lines = formats.vtk_text(dual1, state).splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert lines[4] == "POINTS 8 double"
    assert "CELLS 6 30" in lines and "CELL_TYPES 6" in lines
    assert "POINT_DATA 8" in lines and "CELL_DATA 6" in lines
    i = lines.index("SCALARS pressure double 1") + 2
    assert np.array_equal([float(v) for v in lines[i:i + 8]], state.pressure)
    # a constant species field stays constant after vertex averaging
    const = FomState(state.momentum, state.pressure, np.full(dual1.n_cells, 3.5), 0.0)
    lines = formats.vtk_text(dual1, const).splitlines()
    j = lines.index("SCALARS species double 1") + 2
    assert np.allclose([float(v) for v in lines[j:j + 8]], 3.5, rtol=1e-15)
