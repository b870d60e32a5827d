"""Rule-based ligand cleavage and arm/scaffold decomposition.

A ligand is cut at retrosynthetically meaningful acyclic single bonds, the
resulting fragments are assigned to subpockets by proximity, and whatever is
left over becomes the scaffold. Attachment points remember where bonds were
cut so fragments can be reassembled or relinked.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .chem import (
    AROMATIC,
    DOUBLE,
    SINGLE,
    BondRecord,
    MoleculeGraph,
    connected_components,
)
from .geom import pairwise_distances

if TYPE_CHECKING:  # pragma: no cover
    from .pocket import Subpocket

__all__ = [
    "CLEAVAGE_RULES",
    "ASSIGNMENT_CUTOFF",
    "MIN_ARM_HEAVY_ATOMS",
    "FragmentationError",
    "DecompositionError",
    "Fragment",
    "ArmAssignment",
    "Decomposition",
    "find_cleavable_bonds",
    "fragment_molecule",
    "decompose",
]

# Rule identifiers, checked in order; the first match labels the bond.
CLEAVAGE_RULES = ("R1", "R2", "R3", "R4", "R5", "R6")

# Fragment-to-subpocket assignment: heavy-atom distance cutoff (Angstrom) and
# the fraction of heavy atoms that must fall within it.
ASSIGNMENT_CUTOFF = 4.5
ASSIGNMENT_FRACTION = 0.5

# Assigned fragments below this heavy-atom count are folded into the scaffold.
MIN_ARM_HEAVY_ATOMS = 3


class FragmentationError(Exception):
    """Cleavage produced an inconsistent state (programming error guard)."""


class DecompositionError(Exception):
    """No fragment could be assigned to any subpocket."""


@dataclass(frozen=True)
class Fragment:
    """A subset of a parent molecule's atoms plus its cut-bond endpoints.

    ``atom_indices`` refer to the parent molecule and are kept sorted.
    ``attachment_points`` lists (parent atom index, rule id) pairs, one per
    cleaved bond whose surviving endpoint lies inside this fragment. The atom
    set is usually connected but a scaffold union may not be.
    """

    parent: MoleculeGraph
    atom_indices: tuple[int, ...]
    attachment_points: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        n = len(self.parent.atoms)
        object.__setattr__(self, "atom_indices", tuple(sorted(self.atom_indices)))
        for i in self.atom_indices:
            if not 0 <= i < n:
                raise ValueError(f"atom index {i} outside parent with {n} atoms")
        if len(set(self.atom_indices)) != len(self.atom_indices):
            raise ValueError("duplicate atom indices in fragment")
        member = set(self.atom_indices)
        for i, rule in self.attachment_points:
            if i not in member:
                raise ValueError(f"attachment atom {i} not part of the fragment")

    def __len__(self) -> int:
        return len(self.atom_indices)

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for i in self.atom_indices if self.parent.atoms[i].element != 1)

    def heavy_indices(self) -> tuple[int, ...]:
        return tuple(i for i in self.atom_indices if self.parent.atoms[i].element != 1)

    def coords(self) -> np.ndarray:
        if not self.atom_indices:
            return np.zeros((0, 3))
        return self.parent.coords[list(self.atom_indices)]

    def heavy_coords(self) -> np.ndarray:
        heavy = self.heavy_indices()
        if not heavy:
            return np.zeros((0, 3))
        return self.parent.coords[list(heavy)]

    def centroid(self) -> np.ndarray:
        coords = self.coords()
        if len(coords) == 0:
            raise ValueError("empty fragment has no centroid")
        return coords.mean(axis=0)

    def bonds_within(self) -> tuple[BondRecord, ...]:
        member = set(self.atom_indices)
        return tuple(b for b in self.parent.bonds if b.a in member and b.b in member)

    def standalone(self) -> "Fragment":
        """Reindexed copy whose parent contains exactly this fragment's atoms."""
        mapping = {old: new for new, old in enumerate(self.atom_indices)}
        atoms = tuple(
            replace(self.parent.atoms[old], index=new) for old, new in mapping.items()
        )
        bonds = tuple(
            BondRecord(mapping[b.a], mapping[b.b], b.order) for b in self.bonds_within()
        )
        mol = MoleculeGraph(atoms=atoms, bonds=bonds, name=self.parent.name)
        attach = tuple((mapping[i], rule) for i, rule in self.attachment_points)
        return Fragment(parent=mol, atom_indices=tuple(range(len(atoms))), attachment_points=attach)

    @classmethod
    def from_molecule(
        cls, mol: MoleculeGraph, attachment_points: tuple[tuple[int, str], ...] = ()
    ) -> "Fragment":
        return cls(parent=mol, atom_indices=tuple(range(len(mol.atoms))), attachment_points=attachment_points)


@dataclass(frozen=True)
class ArmAssignment:
    """An arm fragment bound to the subpocket it occupies."""

    fragment: Fragment
    subpocket_id: int
    source_count: int = 1  # fragments merged into this arm


@dataclass(frozen=True)
class Decomposition:
    """Arms, leftover scaffold, and the bonds that were cut to produce them."""

    ligand: MoleculeGraph
    arms: tuple[ArmAssignment, ...]
    scaffold: Fragment
    cleaved_bonds: tuple[BondRecord, ...]


def _is_carbonyl_carbon(mol: MoleculeGraph, i: int) -> bool:
    if mol.atoms[i].element != 6:
        return False
    return any(
        mol.atoms[j].element == 8 and mol.bond_between(i, j).order == DOUBLE
        for j in mol.neighbors(i)
    )


def _is_sulfonyl_sulfur(mol: MoleculeGraph, i: int) -> bool:
    if mol.atoms[i].element != 16:
        return False
    n_double_o = sum(
        1
        for j in mol.neighbors(i)
        if mol.atoms[j].element == 8 and mol.bond_between(i, j).order == DOUBLE
    )
    return n_double_o >= 2


def _is_amide_nitrogen(mol: MoleculeGraph, i: int) -> bool:
    if mol.atoms[i].element != 7:
        return False
    return any(
        _is_carbonyl_carbon(mol, j) or _is_sulfonyl_sulfur(mol, j) for j in mol.neighbors(i)
    )


def _is_sp3_carbon(mol: MoleculeGraph, i: int) -> bool:
    if mol.atoms[i].element != 6:
        return False
    return all(
        mol.bond_between(i, j).order == SINGLE for j in mol.neighbors(i)
    )


def _heavy_degree(mol: MoleculeGraph, i: int) -> int:
    return sum(1 for j in mol.neighbors(i) if mol.atoms[j].element != 1)


def _match_rule(mol: MoleculeGraph, a: int, b: int) -> str | None:
    # R1: amide C(=O)-N (sulfonamide N is handled by R6 on the S-N bond).
    for i, j in ((a, b), (b, a)):
        if _is_carbonyl_carbon(mol, i) and mol.atoms[j].element == 7:
            return "R1"
    # R2: ester C(=O)-O, i.e. carbonyl carbon to single-bonded oxygen.
    for i, j in ((a, b), (b, a)):
        if _is_carbonyl_carbon(mol, i) and mol.atoms[j].element == 8:
            return "R2"
    # R3: ring atom to acyclic carbon.
    for i, j in ((a, b), (b, a)):
        if mol.in_ring(i) and mol.atoms[j].element == 6 and not mol.in_ring(j):
            return "R3"
    # R4: acyclic ether C-O with both of the oxygen's carbons sp3.
    for i, j in ((a, b), (b, a)):
        if mol.atoms[i].element == 8 and mol.atoms[j].element == 6:
            carbons = [k for k in mol.neighbors(i) if mol.atoms[k].element == 6]
            if len(carbons) == 2 and all(_is_sp3_carbon(mol, k) for k in carbons):
                return "R4"
    # R5: secondary/tertiary non-amide amine C-N.
    for i, j in ((a, b), (b, a)):
        if (
            mol.atoms[i].element == 7
            and mol.atoms[j].element == 6
            and not _is_amide_nitrogen(mol, i)
            and _heavy_degree(mol, i) >= 2
        ):
            return "R5"
    # R6: sulfonamide S(=O)(=O)-N.
    for i, j in ((a, b), (b, a)):
        if _is_sulfonyl_sulfur(mol, i) and mol.atoms[j].element == 7:
            return "R6"
    return None


def find_cleavable_bonds(mol: MoleculeGraph) -> tuple[tuple[int, str], ...]:
    """Bond indices eligible for cleavage with the rule that matched.

    Only acyclic single bonds between heavy atoms are considered; ring bonds
    and bonds to hydrogen are never cut. Order follows the bond list.
    """
    out = []
    for k, bond in enumerate(mol.bonds):
        if bond.order != SINGLE:
            continue
        if bond.key in mol.ring_bonds:
            continue
        if mol.atoms[bond.a].element == 1 or mol.atoms[bond.b].element == 1:
            continue
        rule = _match_rule(mol, bond.a, bond.b)
        if rule is not None:
            out.append((k, rule))
    return tuple(out)


def fragment_molecule(mol: MoleculeGraph) -> tuple[tuple[Fragment, ...], tuple[BondRecord, ...]]:
    """Cut every cleavable bond and return connected fragments plus the cut bonds.

    Fragments are ordered by their smallest atom index. Each cut-bond endpoint
    becomes an attachment point on the fragment that retains it.
    """
    cleavable = find_cleavable_bonds(mol)
    cut_keys = {mol.bonds[k].key: rule for k, rule in cleavable}
    kept = tuple(b for b in mol.bonds if b.key not in cut_keys)
    comps = connected_components(len(mol.atoms), kept)

    comp_of = {}
    for c, comp in enumerate(comps):
        for i in comp:
            comp_of[i] = c

    attach: dict[int, list[tuple[int, str]]] = {c: [] for c in range(len(comps))}
    for key, rule in cut_keys.items():
        a, b = key
        if comp_of[a] == comp_of[b]:
            raise FragmentationError(f"cut bond {key} did not separate its endpoints")
        attach[comp_of[a]].append((a, rule))
        attach[comp_of[b]].append((b, rule))

    frags = tuple(
        Fragment(
            parent=mol,
            atom_indices=tuple(comp),
            attachment_points=tuple(sorted(attach[c])),
        )
        for c, comp in enumerate(comps)
    )
    cut_bonds = tuple(b for b in mol.bonds if b.key in cut_keys)
    return frags, cut_bonds


def decompose(
    mol: MoleculeGraph,
    subpockets: Sequence["Subpocket"],
    cutoff: float = ASSIGNMENT_CUTOFF,
    min_heavy: int = MIN_ARM_HEAVY_ATOMS,
) -> Decomposition:
    """Split a ligand into subpocket-assigned arms and a leftover scaffold.

    A fragment belongs to a subpocket when at least half of its heavy atoms
    lie within ``cutoff`` of that subpocket's protein atoms; ties go to the
    smaller mean distance, then the lower subpocket id. Fragments assigned to
    the same subpocket that share a cleaved bond merge into one arm. Assigned
    fragments with fewer than ``min_heavy`` heavy atoms join the scaffold.

    Raises DecompositionError when nothing can be assigned anywhere.
    """
    frags, cut_bonds = fragment_molecule(mol)

    assigned: list[int | None] = []
    for frag in frags:
        heavy = frag.heavy_coords()
        best: tuple[float, int] | None = None
        if len(heavy):
            for sp in subpockets:
                dmin = pairwise_distances(heavy, sp.atom_coords).min(axis=1)
                if (dmin <= cutoff).mean() >= ASSIGNMENT_FRACTION:
                    cand = (float(dmin.mean()), sp.id)
                    if best is None or cand < best:
                        best = cand
        assigned.append(best[1] if best is not None else None)

    # Merge fragments that share a cleaved bond and a subpocket (union-find).
    root = list(range(len(frags)))

    def find(x: int) -> int:
        while root[x] != x:
            root[x] = root[root[x]]
            x = root[x]
        return x

    frag_of = {}
    for c, frag in enumerate(frags):
        for i in frag.atom_indices:
            frag_of[i] = c
    for bond in cut_bonds:
        fa, fb = frag_of[bond.a], frag_of[bond.b]
        if assigned[fa] is not None and assigned[fa] == assigned[fb]:
            root[find(fa)] = find(fb)

    groups: dict[int, list[int]] = {}
    for c in range(len(frags)):
        groups.setdefault(find(c), []).append(c)

    rule_of = {mol.bonds[k].key: rule for k, rule in find_cleavable_bonds(mol)}

    def build_union(members: list[int]) -> Fragment:
        atom_set: set[int] = set()
        for c in members:
            atom_set.update(frags[c].atom_indices)
        attach = []
        for key in sorted(rule_of):
            a, b = key
            if (a in atom_set) != (b in atom_set):
                attach.append(((a if a in atom_set else b), rule_of[key]))
        return Fragment(
            parent=mol,
            atom_indices=tuple(sorted(atom_set)),
            attachment_points=tuple(sorted(attach)),
        )

    arm_groups: list[tuple[int, list[int]]] = []  # (subpocket id, member fragments)
    scaffold_members: list[int] = []
    for rep, members in sorted(groups.items(), key=lambda kv: min(frags[c].atom_indices[0] for c in kv[1]) if kv[1] else 0):
        sp_id = assigned[members[0]]
        if sp_id is None:
            scaffold_members.extend(members)
            continue
        union_heavy = sum(frags[c].heavy_atom_count for c in members)
        if union_heavy < min_heavy:
            scaffold_members.extend(members)
        else:
            arm_groups.append((sp_id, members))

    if not arm_groups:
        raise DecompositionError("no fragment satisfied the subpocket assignment rule")

    arms = tuple(
        ArmAssignment(
            fragment=build_union(members),
            subpocket_id=sp_id,
            source_count=len(members),
        )
        for sp_id, members in arm_groups
    )
    scaffold_atoms: set[int] = set()
    for c in scaffold_members:
        scaffold_atoms.update(frags[c].atom_indices)
    arm_atoms = {i for arm in arms for i in arm.fragment.atom_indices}
    scaffold_attach = []
    for bond in cut_bonds:
        for end in (bond.a, bond.b):
            other = bond.b if end == bond.a else bond.a
            if end in scaffold_atoms and other in arm_atoms:
                scaffold_attach.append((end, rule_of[bond.key]))
    scaffold = Fragment(
        parent=mol,
        atom_indices=tuple(sorted(scaffold_atoms)),
        attachment_points=tuple(sorted(set(scaffold_attach))),
    )
    return Decomposition(ligand=mol, arms=arms, scaffold=scaffold, cleaved_bonds=cut_bonds)
