"""Molecule and protein structure types, PDB/SDF parsing, and ring perception.

Everything downstream (fragmentation, interaction profiling, pocket geometry)
builds on the records defined here. Structures are immutable after
construction; derived views (coordinate arrays, adjacency, rings) are cached
lazily and never mutate the record itself.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

__all__ = [
    "SINGLE",
    "DOUBLE",
    "TRIPLE",
    "AROMATIC",
    "SUPPORTED_ELEMENTS",
    "VDW_RADII",
    "COVALENT_RADII",
    "ATOMIC_MASSES",
    "MAX_VALENCE",
    "WATER_RESIDUES",
    "ChemError",
    "ParseError",
    "UnsupportedElementError",
    "AtomRecord",
    "BondRecord",
    "MoleculeGraph",
    "ProteinAtom",
    "Residue",
    "ProteinStructure",
    "atomic_number",
    "element_symbol",
    "vdw_radius",
    "order_valence",
    "free_valence",
    "connected_components",
    "perceive_rings",
    "aromatic_rings",
    "graph_key",
    "parse_pdb",
    "write_pdb",
    "parse_sdf",
    "parse_sdf_multi",
    "write_sdf",
    "write_sdf_multi",
]

# Bond order codes follow the SDF V2000 convention; 4 marks aromatic bonds.
SINGLE, DOUBLE, TRIPLE, AROMATIC = 1, 2, 3, 4
BOND_ORDERS = (SINGLE, DOUBLE, TRIPLE, AROMATIC)

# Valence contribution per bond order code.
_ORDER_VALENCE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}

# The closed element vocabulary: H, B, C, N, O, F, P, S, Cl, Br, I.
SUPPORTED_ELEMENTS = (1, 5, 6, 7, 8, 9, 15, 16, 17, 35, 53)

_SYMBOLS = {
    1: "H", 5: "B", 6: "C", 7: "N", 8: "O", 9: "F",
    15: "P", 16: "S", 17: "Cl", 35: "Br", 53: "I",
}
_NUMBERS = {sym.upper(): num for num, sym in _SYMBOLS.items()}

# Bondi-style van der Waals radii in Angstrom. This is the single
# authoritative table; pocket carving, occupancy and clash checks all read it.
VDW_RADII = {
    1: 1.20, 5: 1.92, 6: 1.70, 7: 1.55, 8: 1.52, 9: 1.47,
    15: 1.80, 16: 1.80, 17: 1.75, 35: 1.85, 53: 1.98,
}

# Covalent radii (Cordero) used for distance-based bond inference on proteins.
COVALENT_RADII = {
    1: 0.31, 5: 0.84, 6: 0.76, 7: 0.71, 8: 0.66, 9: 0.57,
    15: 1.07, 16: 1.05, 17: 1.02, 35: 1.20, 53: 1.39,
}

ATOMIC_MASSES = {
    1: 1.008, 5: 10.811, 6: 12.011, 7: 14.007, 8: 15.999, 9: 18.998,
    15: 30.974, 16: 32.065, 17: 35.453, 35: 79.904, 53: 126.904,
}

# Maximum plausible valence per element (S may reach 6, P 5).
MAX_VALENCE = {
    1: 1, 5: 3, 6: 4, 7: 3, 8: 2, 9: 1,
    15: 5, 16: 6, 17: 1, 35: 1, 53: 1,
}

WATER_RESIDUES = frozenset({"HOH", "WAT", "H2O", "SOL", "TIP3"})

# Tolerance added to the covalent radius sum when inferring protein bonds,
# and the minimum plausible bond length, both in Angstrom.
BOND_INFER_TOLERANCE = 0.40
BOND_INFER_MIN = 0.40


class ChemError(Exception):
    """Base class for structure and parsing failures."""


class ParseError(ChemError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedElementError(ChemError):
    """Element outside the closed vocabulary."""


def atomic_number(symbol: str, line: int | None = None) -> int:
    num = _NUMBERS.get(symbol.strip().upper())
    if num is None:
        loc = f" (line {line})" if line is not None else ""
        raise UnsupportedElementError(f"unsupported element {symbol!r}{loc}")
    return num


def element_symbol(element: int) -> str:
    try:
        return _SYMBOLS[element]
    except KeyError:
        raise UnsupportedElementError(f"unsupported atomic number {element}") from None


def vdw_radius(element: int) -> float:
    try:
        return VDW_RADII[element]
    except KeyError:
        raise UnsupportedElementError(f"unsupported atomic number {element}") from None


def order_valence(order: int) -> float:
    return _ORDER_VALENCE[order]


def _check_element(element: int) -> None:
    if element not in VDW_RADII:
        raise UnsupportedElementError(f"unsupported atomic number {element}")


def _check_position(position: tuple[float, float, float]) -> None:
    if len(position) != 3 or not all(np.isfinite(v) for v in position):
        raise ValueError(f"position must be three finite floats, got {position!r}")


@dataclass(frozen=True)
class AtomRecord:
    """One ligand atom: element, Cartesian position (Angstrom), charge, aromatic flag."""

    index: int
    element: int
    position: tuple[float, float, float]
    formal_charge: int = 0
    is_aromatic: bool = False

    def __post_init__(self):
        _check_element(self.element)
        _check_position(self.position)
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))


@dataclass(frozen=True)
class BondRecord:
    """Undirected bond between atom indices ``a`` and ``b`` with an order code."""

    a: int
    b: int
    order: int = SINGLE

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"self-bond on atom {self.a}")
        if self.order not in _ORDER_VALENCE:
            raise ValueError(f"bad bond order code {self.order}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


@dataclass(frozen=True, eq=True)
class MoleculeGraph:
    """A small molecule as an explicit atom list plus an undirected bond list.

    Indices in bonds refer to positions in ``atoms``. The graph may have
    several connected components (a cut ligand, or an assembled scaffold
    union); callers that need connectivity check it explicitly.
    """

    atoms: tuple[AtomRecord, ...]
    bonds: tuple[BondRecord, ...]
    name: str = ""

    def __post_init__(self):
        n = len(self.atoms)
        for pos, atom in enumerate(self.atoms):
            if atom.index != pos:
                raise ValueError(f"atom at position {pos} carries index {atom.index}")
        seen: set[tuple[int, int]] = set()
        for bond in self.bonds:
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValueError(f"bond {bond.a}-{bond.b} out of range for {n} atoms")
            if bond.key in seen:
                raise ValueError(f"duplicate bond {bond.key}")
            seen.add(bond.key)

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def coords(self) -> np.ndarray:
        # (N, 3) float64, Angstrom
        if not self.atoms:
            return np.zeros((0, 3))
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    @cached_property
    def elements(self) -> np.ndarray:
        return np.array([a.element for a in self.atoms], dtype=np.int64)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            nbrs[bond.a].append(bond.b)
            nbrs[bond.b].append(bond.a)
        return tuple(tuple(sorted(ns)) for ns in nbrs)

    @cached_property
    def bond_lookup(self) -> dict[tuple[int, int], BondRecord]:
        return {b.key: b for b in self.bonds}

    @cached_property
    def rings(self) -> tuple[tuple[int, ...], ...]:
        return perceive_rings(self)

    @cached_property
    def ring_bonds(self) -> frozenset[tuple[int, int]]:
        """Bond keys that lie on some cycle (robust bridge test, not ring-basis membership)."""
        return _non_bridge_edges(len(self.atoms), self.bonds)

    def bond_between(self, i: int, j: int) -> BondRecord | None:
        return self.bond_lookup.get((i, j) if i < j else (j, i))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def heavy_indices(self) -> tuple[int, ...]:
        return tuple(a.index for a in self.atoms if a.element != 1)

    def in_ring(self, i: int) -> bool:
        return any(i in key for key in self.ring_bonds)

    def with_coords(self, coords: np.ndarray, name: str | None = None) -> "MoleculeGraph":
        """Copy of this molecule with replaced positions (rigid poses, noise frames)."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (len(self.atoms), 3):
            raise ValueError(f"expected coords of shape ({len(self.atoms)}, 3), got {coords.shape}")
        atoms = tuple(
            replace(atom, position=tuple(float(v) for v in coords[k]))
            for k, atom in enumerate(self.atoms)
        )
        return MoleculeGraph(atoms=atoms, bonds=self.bonds, name=self.name if name is None else name)


@dataclass(frozen=True)
class ProteinAtom:
    """One protein (or crystallographic water) atom with residue bookkeeping."""

    index: int
    element: int
    position: tuple[float, float, float]
    atom_name: str
    res_name: str
    res_seq: int
    chain_id: str
    formal_charge: int = 0
    is_solvent: bool = False

    def __post_init__(self):
        _check_element(self.element)
        _check_position(self.position)
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))

    @property
    def residue_key(self) -> tuple[str, int, str]:
        return (self.chain_id, self.res_seq, self.res_name)


@dataclass(frozen=True)
class Residue:
    """Grouping of protein atom indices that share (chain, sequence number, name)."""

    key: tuple[str, int, str]
    atom_indices: tuple[int, ...]

    @property
    def name(self) -> str:
        return self.key[2]


@dataclass(frozen=True)
class ProteinStructure:
    """Protein atoms in file order; residues and inferred bonds are derived views."""

    atoms: tuple[ProteinAtom, ...]
    name: str = ""

    def __post_init__(self):
        for pos, atom in enumerate(self.atoms):
            if atom.index != pos:
                raise ValueError(f"atom at position {pos} carries index {atom.index}")

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def coords(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 3))
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    @cached_property
    def elements(self) -> np.ndarray:
        return np.array([a.element for a in self.atoms], dtype=np.int64)

    @cached_property
    def residues(self) -> tuple[Residue, ...]:
        order: list[tuple[str, int, str]] = []
        groups: dict[tuple[str, int, str], list[int]] = {}
        for atom in self.atoms:
            key = atom.residue_key
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(atom.index)
        return tuple(Residue(key=key, atom_indices=tuple(groups[key])) for key in order)

    @cached_property
    def residue_of(self) -> dict[int, Residue]:
        table: dict[int, Residue] = {}
        for res in self.residues:
            for i in res.atom_indices:
                table[i] = res
        return table

    @cached_property
    def bonds(self) -> tuple[BondRecord, ...]:
        """Bonds inferred from covalent radii: d <= r_i + r_j + 0.40 A, d >= 0.40 A."""
        n = len(self.atoms)
        if n < 2:
            return ()
        radii = np.array([COVALENT_RADII[a.element] for a in self.atoms])
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        limit = radii[:, None] + radii[None, :] + BOND_INFER_TOLERANCE
        hit = (dist <= limit) & (dist >= BOND_INFER_MIN)
        out = []
        for i in range(n):
            for j in range(i + 1, n):
                if hit[i, j]:
                    out.append(BondRecord(i, j, SINGLE))
        return tuple(out)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            nbrs[bond.a].append(bond.b)
            nbrs[bond.b].append(bond.a)
        return tuple(tuple(sorted(ns)) for ns in nbrs)

    def heavy_indices(self) -> tuple[int, ...]:
        return tuple(a.index for a in self.atoms if a.element != 1)

    def subset(self, indices) -> "ProteinStructure":
        """Reindexed structure containing only ``indices``, in ascending order."""
        picked = sorted(set(indices))
        atoms = tuple(
            replace(self.atoms[old], index=new) for new, old in enumerate(picked)
        )
        return ProteinStructure(atoms=atoms, name=self.name)


def free_valence(mol: MoleculeGraph, i: int) -> float:
    """Remaining valence of atom ``i`` given its explicit bonds (aromatic counts 1.5)."""
    used = sum(order_valence(b.order) for b in mol.bonds if i in (b.a, b.b))
    return MAX_VALENCE[mol.atoms[i].element] - used


def explicit_hydrogens(mol: MoleculeGraph, i: int) -> tuple[int, ...]:
    return tuple(j for j in mol.neighbors(i) if mol.atoms[j].element == 1)


def has_hydrogens(mol: MoleculeGraph) -> bool:
    return any(a.element == 1 for a in mol.atoms)


def connected_components(n: int, bonds) -> list[list[int]]:
    """Connected components over ``n`` vertices, each sorted, ordered by smallest member."""
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for bond in bonds:
        a, b = (bond.a, bond.b) if isinstance(bond, BondRecord) else bond
        nbrs[a].append(b)
        nbrs[b].append(a)
    seen = [False] * n
    comps: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in nbrs[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        comps.append(sorted(comp))
    return comps


def _non_bridge_edges(n: int, bonds: tuple[BondRecord, ...]) -> frozenset[tuple[int, int]]:
    """Edges lying on some cycle, found by removing bridges (iterative DFS low-link)."""
    nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, bond in enumerate(bonds):
        nbrs[bond.a].append((bond.b, k))
        nbrs[bond.b].append((bond.a, k))
    visited = [False] * n
    disc = [0] * n
    low = [0] * n
    timer = 0
    bridges: set[int] = set()
    for root in range(n):
        if visited[root]:
            continue
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]  # (vertex, in-edge, child cursor)
        visited[root] = True
        disc[root] = low[root] = timer = timer + 1
        while stack:
            v, in_edge, cursor = stack.pop()
            if cursor < len(nbrs[v]):
                stack.append((v, in_edge, cursor + 1))
                w, k = nbrs[v][cursor]
                if k == in_edge:
                    continue
                if visited[w]:
                    low[v] = min(low[v], disc[w])
                else:
                    visited[w] = True
                    timer += 1
                    disc[w] = low[w] = timer
                    stack.append((w, k, 0))
            elif in_edge != -1:
                parent = bonds[in_edge].a if bonds[in_edge].b == v else bonds[in_edge].b
                low[parent] = min(low[parent], low[v])
                if low[v] > disc[parent]:
                    bridges.add(in_edge)
    return frozenset(b.key for k, b in enumerate(bonds) if k not in bridges)


def _canonical_cycle(path: list[int]) -> tuple[int, ...]:
    """Rotate/reflect a vertex cycle so it starts at the min atom toward its smaller neighbor."""
    k = path.index(min(path))
    rotated = path[k:] + path[:k]
    if len(rotated) > 2 and rotated[-1] < rotated[1]:
        rotated = [rotated[0]] + rotated[1:][::-1]
    return tuple(rotated)


def _cycle_edges(cycle: tuple[int, ...]) -> list[tuple[int, int]]:
    out = []
    for k in range(len(cycle)):
        a, b = cycle[k], cycle[(k + 1) % len(cycle)]
        out.append((a, b) if a < b else (b, a))
    return out


def perceive_rings(mol: MoleculeGraph) -> tuple[tuple[int, ...], ...]:
    """Smallest set of smallest rings.

    Candidate rings come from per-edge shortest cycles; a greedy scan ordered
    by (size, atom tuple) keeps candidates whose edge sets are linearly
    independent over GF(2), until the cycle-space dimension is reached. The
    ordering makes the result independent of atom input order ties.
    """
    n = len(mol.atoms)
    edges = [b.key for b in mol.bonds]
    edge_pos = {e: k for k, e in enumerate(edges)}
    dim = len(edges) - n + len(connected_components(n, mol.bonds))
    if dim <= 0:
        return ()

    nbrs = mol.adjacency
    candidates: dict[frozenset[tuple[int, int]], tuple[int, ...]] = {}
    for u, v in edges:
        path = _shortest_path(nbrs, u, v, blocked=(u, v))
        if path is None:
            continue
        cyc = _canonical_cycle(path)
        candidates.setdefault(frozenset(_cycle_edges(cyc)), cyc)

    ordered = sorted(candidates.values(), key=lambda c: (len(c), c))
    basis: list[int] = []
    chosen: list[tuple[int, ...]] = []
    for cyc in ordered:
        vec = 0
        for e in _cycle_edges(cyc):
            vec ^= 1 << edge_pos[e]
        for row in basis:
            vec = min(vec, vec ^ row)
        if vec:
            basis.append(vec)
            basis.sort(reverse=True)
            chosen.append(cyc)
            if len(chosen) == dim:
                break
    return tuple(sorted(chosen, key=lambda c: (len(c), c)))


def _shortest_path(nbrs, u: int, v: int, blocked: tuple[int, int]) -> list[int] | None:
    """BFS path from u to v that never takes the blocked edge directly."""
    from collections import deque

    prev = {u: -1}
    queue = deque([u])
    while queue:
        x = queue.popleft()
        if x == v:
            path = [v]
            while path[-1] != u:
                path.append(prev[path[-1]])
            return path[::-1]
        for y in nbrs[x]:
            if {x, y} == set(blocked) or y in prev:
                continue
            prev[y] = x
            queue.append(y)
    return None


def aromatic_rings(mol: MoleculeGraph) -> tuple[tuple[int, ...], ...]:
    """Perceived rings whose bonds are all aromatic."""
    out = []
    for ring in mol.rings:
        bonds = [mol.bond_between(a, b) for a, b in _cycle_edges(ring)]
        if all(b is not None and b.order == AROMATIC for b in bonds):
            out.append(ring)
    return tuple(out)


def graph_key(mol: MoleculeGraph) -> str:
    """Canonical hash of the labeled graph (element, charge, bonds), coordinate-free.

    Three rounds of neighborhood label refinement then a digest; used to
    deduplicate arms and library entries regardless of atom order or pose.
    """
    labels = {
        a.index: hashlib.sha256(
            f"{a.element}|{a.formal_charge}|{a.is_aromatic}".encode()
        ).hexdigest()
        for a in mol.atoms
    }
    for _ in range(3):
        nxt = {}
        for a in mol.atoms:
            env = sorted(
                (mol.bond_between(a.index, j).order, labels[j]) for j in mol.neighbors(a.index)
            )
            nxt[a.index] = hashlib.sha256((labels[a.index] + repr(env)).encode()).hexdigest()
        labels = nxt
    bond_part = sorted(
        tuple(sorted((labels[b.a], labels[b.b]))) + (str(b.order),) for b in mol.bonds
    )
    payload = repr(sorted(labels.values())) + repr(bond_part)
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# PDB


def _element_from_atom_name(name_field: str) -> str:
    # Classic columns heuristic: a leading space or digit means a one-letter
    # element in column 14; otherwise try a two-letter symbol (Cl, Br).
    padded = name_field.ljust(4)
    if padded[0] in " 0123456789":
        return padded[1]
    two = padded[:2].strip().upper()
    if two in _NUMBERS and len(two) == 2:
        return two
    return padded[0]


def _parse_pdb_charge(text: str) -> int:
    text = text.strip()
    if not text:
        return 0
    # PDB writes charges as "1+", "2-"; tolerate "+1" too.
    try:
        if text.endswith(("+", "-")):
            return int(text[-1] + text[:-1])
        return int(text)
    except ValueError:
        return 0


def parse_pdb(text: str, name: str = "") -> ProteinStructure:
    """Fixed-column PDB reader for ATOM/HETATM records.

    Other record types are skipped; alternate locations other than blank or
    'A' are dropped. Water residues are kept and flagged ``is_solvent``.
    Raises ParseError (with line number) on malformed fields and
    UnsupportedElementError on elements outside the vocabulary.
    """
    atoms: list[ProteinAtom] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        record = raw[:6].strip()
        if record not in ("ATOM", "HETATM"):
            continue
        line = raw.ljust(80)
        if line[16] not in (" ", "A"):
            continue
        try:
            x, y, z = float(line[30:38]), float(line[38:46]), float(line[46:54])
        except ValueError as exc:
            raise ParseError("malformed coordinates", lineno) from exc
        if not np.isfinite([x, y, z]).all():
            raise ParseError("non-finite coordinates", lineno)
        try:
            res_seq = int(line[22:26])
        except ValueError as exc:
            raise ParseError("malformed residue number", lineno) from exc
        atom_name = line[12:16].strip()
        res_name = line[17:20].strip()
        symbol = line[76:78].strip() or _element_from_atom_name(line[12:16])
        element = atomic_number(symbol, lineno)
        atoms.append(
            ProteinAtom(
                index=len(atoms),
                element=element,
                position=(x, y, z),
                atom_name=atom_name,
                res_name=res_name,
                res_seq=res_seq,
                chain_id=line[21],
                formal_charge=_parse_pdb_charge(line[78:80]),
                is_solvent=res_name.upper() in WATER_RESIDUES,
            )
        )
    return ProteinStructure(atoms=tuple(atoms), name=name)


def write_pdb(protein: ProteinStructure) -> str:
    """Minimal fixed-column PDB writer (ATOM/HETATM plus END)."""
    lines = []
    for atom in protein.atoms:
        record = "HETATM" if atom.is_solvent else "ATOM  "
        sym = element_symbol(atom.element)
        name = atom.atom_name if len(atom.atom_name) >= 4 else f" {atom.atom_name:<3s}"
        charge = ""
        if atom.formal_charge:
            charge = f"{abs(atom.formal_charge)}{'+' if atom.formal_charge > 0 else '-'}"
        x, y, z = atom.position
        lines.append(
            f"{record}{atom.index + 1:5d} {name:<4.4s} {atom.res_name:<3.3s} "
            f"{atom.chain_id:1.1s}{atom.res_seq:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          "
            f"{sym:>2.2s}{charge:<2.2s}"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SDF (V2000)


def parse_sdf_multi(text: str, name: str = "") -> list[MoleculeGraph]:
    """Parse every record of a V2000 SDF string, in file order."""
    lines = text.splitlines()
    mols: list[MoleculeGraph] = []
    i = 0
    while i < len(lines):
        if all(not ln.strip() for ln in lines[i:]):
            break
        mol, i = _parse_sdf_record(lines, i, default_name=name)
        mols.append(mol)
    return mols


def parse_sdf(text: str, name: str = "") -> MoleculeGraph:
    """Parse the first molecule record of a V2000 SDF string."""
    mols = parse_sdf_multi(text, name=name)
    if not mols:
        raise ParseError("no molecule record found")
    return mols[0]


def _parse_sdf_record(lines: list[str], start: int, default_name: str) -> tuple[MoleculeGraph, int]:
    if start + 3 >= len(lines):
        raise ParseError("truncated header block", start + 1)
    mol_name = lines[start].strip() or default_name
    counts_line = lines[start + 3]
    counts_no = start + 4
    try:
        natoms = int(counts_line[0:3])
        nbonds = int(counts_line[3:6])
    except ValueError as exc:
        raise ParseError("malformed counts line", counts_no) from exc
    if natoms < 0 or nbonds < 0:
        raise ParseError("negative counts", counts_no)

    atom_rows: list[tuple[float, float, float, int]] = []
    base = start + 4
    for k in range(natoms):
        lineno = base + k + 1
        if base + k >= len(lines) or lines[base + k].startswith(("M  END", "$$$$")):
            raise ParseError(f"atom block ended early ({k} of {natoms} atoms)", lineno)
        row = lines[base + k]
        try:
            x, y, z = float(row[0:10]), float(row[10:20]), float(row[20:30])
        except ValueError as exc:
            raise ParseError("malformed atom coordinates", lineno) from exc
        symbol = row[31:34].strip()
        atom_rows.append((x, y, z, atomic_number(symbol, lineno)))

    bond_rows: list[tuple[int, int, int]] = []
    bbase = base + natoms
    for k in range(nbonds):
        lineno = bbase + k + 1
        if bbase + k >= len(lines) or lines[bbase + k].startswith(("M  END", "$$$$")):
            raise ParseError(f"bond block ended early ({k} of {nbonds} bonds)", lineno)
        row = lines[bbase + k]
        try:
            a, b, code = int(row[0:3]) - 1, int(row[3:6]) - 1, int(row[6:9])
        except ValueError as exc:
            raise ParseError("malformed bond row", lineno) from exc
        if not (0 <= a < natoms and 0 <= b < natoms):
            raise ParseError(f"bond row references atom outside 1..{natoms}", lineno)
        if code not in _ORDER_VALENCE:
            raise ParseError(f"unsupported bond code {code}", lineno)
        bond_rows.append((a, b, code))

    charges: dict[int, int] = {}
    i = bbase + nbonds
    while i < len(lines) and not lines[i].startswith("$$$$"):
        row = lines[i]
        if row.startswith("M  CHG"):
            parts = row.split()
            try:
                npairs = int(parts[2])
                for p in range(npairs):
                    idx = int(parts[3 + 2 * p]) - 1
                    charges[idx] = int(parts[4 + 2 * p])
            except (ValueError, IndexError) as exc:
                raise ParseError("malformed charge property", i + 1) from exc
        if row.startswith("M  END"):
            i += 1
            # skip data items until the record terminator
            while i < len(lines) and not lines[i].startswith("$$$$"):
                i += 1
            break
        i += 1
    if i < len(lines) and lines[i].startswith("$$$$"):
        i += 1

    aromatic = [False] * natoms
    for a, b, code in bond_rows:
        if code == AROMATIC:
            aromatic[a] = True
            aromatic[b] = True
    atoms = tuple(
        AtomRecord(
            index=k,
            element=elem,
            position=(x, y, z),
            formal_charge=charges.get(k, 0),
            is_aromatic=aromatic[k],
        )
        for k, (x, y, z, elem) in enumerate(atom_rows)
    )
    bonds = tuple(BondRecord(a, b, code) for a, b, code in bond_rows)
    mol = MoleculeGraph(atoms=atoms, bonds=bonds, name=mol_name)
    mol.rings  # ring perception runs as part of loading
    return mol, i


def write_sdf(mol: MoleculeGraph) -> str:
    """Serialize one molecule as a V2000 record ending in ``$$$$``.

    The program line is a fixed tag, never a timestamp, so output bytes are
    reproducible. Coordinates are written at 4 decimals.
    """
    lines = [mol.name, "  fraglink 3D", ""]
    lines.append(f"{len(mol.atoms):3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
    for atom in mol.atoms:
        x, y, z = atom.position
        sym = element_symbol(atom.element)
        lines.append(
            f"{x:10.4f}{y:10.4f}{z:10.4f} {sym:<3s} 0  0  0  0  0  0  0  0  0  0  0  0"
        )
    for bond in mol.bonds:
        lines.append(f"{bond.a + 1:3d}{bond.b + 1:3d}{bond.order:3d}  0")
    charged = [(a.index, a.formal_charge) for a in mol.atoms if a.formal_charge]
    for k in range(0, len(charged), 8):
        chunk = charged[k : k + 8]
        row = f"M  CHG{len(chunk):3d}"
        for idx, chg in chunk:
            row += f"{idx + 1:4d}{chg:4d}"
        lines.append(row)
    lines.append("M  END")
    lines.append("$$$$")
    return "\n".join(lines) + "\n"


def write_sdf_multi(mols) -> str:
    return "".join(write_sdf(m) for m in mols)
