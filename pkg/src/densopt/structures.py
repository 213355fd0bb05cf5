"""Atomic structures, extended-XYZ parsing and neighbor lists."""

from __future__ import annotations

import math
import re
import shlex
from dataclasses import dataclass, field

import numpy as np

from .elements import atomic_number, element_symbol


class StructureError(Exception):
    """Raised for malformed structure files or invalid structure data."""


@dataclass
class Structure:
    """An atomic configuration, optionally periodic.

    positions are Cartesian (angstrom), cell rows are lattice vectors,
    species are atomic numbers.
    """

    positions: np.ndarray
    species: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple[bool, bool, bool] = (False, False, False)
    energy: float | None = None
    forces: np.ndarray | None = None
    properties: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.species = np.asarray(self.species, dtype=int)
        if len(self.positions) != len(self.species):
            raise StructureError(
                f"{len(self.positions)} positions but {len(self.species)} species"
            )
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=float).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None or abs(np.linalg.det(self.cell)) < 1e-10:
                raise StructureError("periodic structure requires a non-singular cell")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=float).reshape(-1, 3)
            if len(self.forces) != len(self.positions):
                raise StructureError("forces length does not match positions")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class Environment:
    """Atom-centered neighborhood within a cutoff.

    Neighbor arrays are index-aligned: species[k], vecs[k] (displacement from
    the center, angstrom), dists[k] = |vecs[k]|, and indices[k] (index of the
    neighbor atom in the parent structure, used for force assembly).
    """

    structure_id: int
    center: int
    center_species: int
    species: np.ndarray
    vecs: np.ndarray
    dists: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.dists)


_KEYVAL_RE = re.compile(r'([A-Za-z_][A-Za-z0-9_]*)=("(?:[^"]*)"|\S+)')


def _parse_comment_line(line: str) -> dict:
    out = {}
    for key, raw in _KEYVAL_RE.findall(line):
        if raw.startswith('"'):
            raw = raw[1:-1]
        out[key] = raw
    return out


def _parse_properties(spec: str):
    """Split a Properties=name:type:ncols:... string into (name, type, ncols)."""
    parts = spec.split(":")
    if len(parts) % 3 != 0:
        raise StructureError(f"malformed Properties specification {spec!r}")
    cols = []
    for i in range(0, len(parts), 3):
        cols.append((parts[i], parts[i + 1], int(parts[i + 2])))
    return cols


def parse_extxyz(text: str) -> list[Structure]:
    """Parse an extended-XYZ string into a list of Structures."""
    lines = text.splitlines()
    frames: list[Structure] = []
    i = 0
    frame_no = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        frame_no += 1
        try:
            natoms = int(lines[i].strip())
        except ValueError:
            raise StructureError(
                f"frame {frame_no}: malformed atom count at line {i + 1}: {lines[i]!r}"
            ) from None
        if i + 1 + natoms >= len(lines) + 1 and natoms > 0 and i + 1 + natoms > len(lines):
            raise StructureError(f"frame {frame_no}: truncated (expected {natoms} atom lines)")
        header = _parse_comment_line(lines[i + 1] if i + 1 < len(lines) else "")

        cell = None
        pbc = (False, False, False)
        if "Lattice" in header:
            vals = [float(x) for x in header["Lattice"].split()]
            if len(vals) != 9:
                raise StructureError(f"frame {frame_no}: Lattice needs 9 floats")
            cell = np.array(vals).reshape(3, 3)
            if "pbc" in header:
                flags = header["pbc"].split()
                pbc = tuple(f in ("T", "True", "true", "1") for f in flags)
            else:
                pbc = (True, True, True)

        cols = [("species", "S", 1), ("pos", "R", 3)]
        if "Properties" in header:
            cols = _parse_properties(header["Properties"])

        ncols = sum(c[2] for c in cols)
        species = []
        positions = []
        forces = None
        if any(name == "forces" for name, _, _ in cols):
            forces = []
        for k in range(natoms):
            lineno = i + 2 + k
            if lineno >= len(lines):
                raise StructureError(f"frame {frame_no}: truncated at line {lineno + 1}")
            fields = lines[lineno].split()
            if len(fields) != ncols:
                raise StructureError(
                    f"frame {frame_no}: line {lineno + 1} has {len(fields)} columns, expected {ncols}"
                )
            ofs = 0
            for name, typ, width in cols:
                chunk = fields[ofs:ofs + width]
                ofs += width
                if name == "species":
                    try:
                        species.append(atomic_number(chunk[0]))
                    except ValueError:
                        raise StructureError(
                            f"frame {frame_no}: unknown element symbol {chunk[0]!r} at line {lineno + 1}"
                        ) from None
                elif name == "pos":
                    positions.append([float(x) for x in chunk])
                elif name == "forces":
                    forces.append([float(x) for x in chunk])

        energy = float(header["energy"]) if "energy" in header else None
        frames.append(
            Structure(
                positions=np.array(positions).reshape(natoms, 3),
                species=np.array(species, dtype=int),
                cell=cell,
                pbc=pbc,
                energy=energy,
                forces=np.array(forces) if forces is not None else None,
            )
        )
        i += 2 + natoms
    return frames


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_extxyz(structures: list[Structure]) -> str:
    """Serialize structures to extended-XYZ (round-trips through parse_extxyz)."""
    out = []
    for s in structures:
        out.append(str(len(s)))
        props = "species:S:1:pos:R:3"
        if s.forces is not None:
            props += ":forces:R:3"
        header = []
        if s.cell is not None:
            header.append('Lattice="' + " ".join(_fmt(x) for x in s.cell.ravel()) + '"')
            header.append("pbc=" + " ".join("T" if p else "F" for p in s.pbc))
        header.append(f"Properties={props}")
        if s.energy is not None:
            header.append(f"energy={_fmt(s.energy)}")
        out.append(" ".join(header))
        for k in range(len(s)):
            fields = [element_symbol(s.species[k])]
            fields += [_fmt(x) for x in s.positions[k]]
            if s.forces is not None:
                fields += [_fmt(x) for x in s.forces[k]]
            out.append(" ".join(fields))
    return "\n".join(out) + "\n"


def _replica_counts(cell: np.ndarray, pbc, rcut: float) -> list[int]:
    """Replicas per axis so every image within rcut is covered."""
    vol = abs(np.linalg.det(cell))
    counts = []
    for a in range(3):
        if not pbc[a]:
            counts.append(0)
            continue
        b, c = (a + 1) % 3, (a + 2) % 3
        height = vol / np.linalg.norm(np.cross(cell[b], cell[c]))
        counts.append(int(math.ceil(rcut / height)))
    return counts


def neighbor_list(s: Structure, rcut: float, structure_id: int = 0) -> list[Environment]:
    """Build one Environment per atom with all neighbors (periodic images
    included) at 0 < r <= rcut.  The center atom itself (r = 0) is excluded."""
    if rcut <= 0:
        raise ValueError("rcut must be positive")
    n = len(s)
    if any(s.pbc):
        if s.cell is None or abs(np.linalg.det(s.cell)) < 1e-10:
            raise StructureError("singular cell with periodic boundary conditions")
        na, nb, nc = _replica_counts(s.cell, s.pbc, rcut)
        shifts = [
            ia * s.cell[0] + ib * s.cell[1] + ic * s.cell[2]
            for ia in range(-na, na + 1)
            for ib in range(-nb, nb + 1)
            for ic in range(-nc, nc + 1)
        ]
        shifts = np.array(shifts)
    else:
        shifts = np.zeros((1, 3))

    envs = []
    for i in range(n):
        # displacement of every atom image from atom i
        disp = (s.positions[None, :, :] + shifts[:, None, :]) - s.positions[i]
        disp = disp.reshape(-1, 3)
        idx = np.tile(np.arange(n), len(shifts))
        dist = np.linalg.norm(disp, axis=1)
        mask = (dist > 1e-12) & (dist <= rcut)
        envs.append(
            Environment(
                structure_id=structure_id,
                center=i,
                center_species=int(s.species[i]),
                species=s.species[idx[mask]].copy(),
                vecs=disp[mask].copy(),
                dists=dist[mask].copy(),
                indices=idx[mask].copy(),
            )
        )
    return envs


def neighbor_lists(structures: list[Structure], rcut: float) -> list[Environment]:
    """Neighbor lists for a dataset; structure_id indexes into `structures`."""
    envs = []
    for sid, s in enumerate(structures):
        envs.extend(neighbor_list(s, rcut, structure_id=sid))
    return envs


def apply_rotation(s: Structure, R: np.ndarray) -> Structure:
    """Rotate positions and cell rows by the orthogonal matrix R."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-12):
        raise ValueError("R must be a 3x3 orthogonal matrix")
    return Structure(
        positions=s.positions @ R.T,
        species=s.species.copy(),
        cell=s.cell @ R.T if s.cell is not None else None,
        pbc=s.pbc,
        energy=s.energy,
        forces=s.forces @ R.T if s.forces is not None else None,
        properties=dict(s.properties),
    )
