"""Geometric detection of seven non-covalent interaction classes.

Given a protein structure and a posed arm, each detector applies fixed
distance/angle rules and emits typed records; the per-class counts feed the
concept labels. All geometry reduces to distances and angles, so counts and
scalars are invariant under rigid motions of the whole complex.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .chem import (
    DOUBLE,
    SINGLE,
    MoleculeGraph,
    ProteinStructure,
    order_valence,
    MAX_VALENCE,
)
from .fragment import Fragment
from .geom import pairwise_distances

__all__ = [
    "INTERACTION_KINDS",
    "InteractionThresholds",
    "DEFAULT_THRESHOLDS",
    "InteractionRecord",
    "InteractionProfile",
    "detect_interactions",
    "count_vector",
    "molecule_acceptors",
    "molecule_donors",
    "profile_to_json",
]

INTERACTION_KINDS = (
    "hbond",
    "hydrophobic",
    "pi_stacking",
    "salt_bridge",
    "water_bridge",
    "halogen_bond",
    "pi_cation",
)

_HALOGENS = (17, 35, 53)


@dataclass(frozen=True)
class InteractionThresholds:
    """Distance (Angstrom) and angle (degree) cutoffs for every detector."""

    hbond_distance: float = 3.5
    hbond_angle: float = 120.0
    hydrophobic_distance: float = 4.0
    stack_centroid: float = 5.5
    stack_parallel_angle: float = 30.0
    stack_t_angle_lo: float = 60.0
    stack_t_angle_hi: float = 90.0
    stack_offset: float = 2.0
    salt_distance: float = 5.5
    water_distance: float = 3.5
    water_angle_lo: float = 75.0
    water_angle_hi: float = 140.0
    halogen_distance: float = 4.0
    halogen_angle: float = 140.0
    cation_distance: float = 6.0


DEFAULT_THRESHOLDS = InteractionThresholds()


@dataclass(frozen=True)
class InteractionRecord:
    """One detected contact with the scalars that satisfied its rule."""

    kind: str
    ligand_atoms: tuple[int, ...]
    protein_atoms: tuple[int, ...]
    geometry: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if self.kind not in INTERACTION_KINDS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if not self.ligand_atoms or not self.protein_atoms:
            raise ValueError("interaction record needs atoms on both sides")

    def scalar(self, name: str) -> float:
        for key, value in self.geometry:
            if key == name:
                return value
        raise KeyError(name)


@dataclass(frozen=True)
class InteractionProfile:
    """All records for one arm/protein pair plus the 7-vector of counts."""

    counts: tuple[int, ...]
    records: tuple[InteractionRecord, ...]

    def __post_init__(self):
        if len(self.counts) != len(INTERACTION_KINDS):
            raise ValueError("counts must have one entry per interaction kind")
        for k, kind in enumerate(INTERACTION_KINDS):
            n = sum(1 for r in self.records if r.kind == kind)
            if n != self.counts[k]:
                raise ValueError(f"counts[{k}] != number of {kind} records")


def count_vector(profile: InteractionProfile) -> np.ndarray:
    """The per-kind counts as a fresh integer array."""
    return np.array(profile.counts, dtype=np.int64)


def profile_to_json(profile: InteractionProfile) -> str:
    payload = {
        "counts": {kind: profile.counts[k] for k, kind in enumerate(INTERACTION_KINDS)},
        "records": [
            {
                "kind": r.kind,
                "ligand_atoms": list(r.ligand_atoms),
                "protein_atoms": list(r.protein_atoms),
                "geometry": {name: value for name, value in r.geometry},
            }
            for r in profile.records
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def _angle_deg(v1: np.ndarray, v2: np.ndarray) -> float:
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    cosine = float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))
    return math.degrees(math.acos(cosine))


def _plane_normal(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered)
    return vt[2]


# --- ligand-side typing (graph local to the arm) ---------------------------


class _ArmView:
    """Arm atoms with bonds restricted to the fragment."""

    def __init__(self, arm: Fragment):
        self.arm = arm
        self.mol: MoleculeGraph = arm.parent
        self.member = set(arm.atom_indices)
        self._nbrs: dict[int, tuple[int, ...]] = {
            i: tuple(j for j in self.mol.neighbors(i) if j in self.member)
            for i in arm.atom_indices
        }
        self.has_h = any(self.mol.atoms[i].element == 1 for i in arm.atom_indices)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._nbrs[i]

    def element(self, i: int) -> int:
        return self.mol.atoms[i].element

    def charge(self, i: int) -> int:
        return self.mol.atoms[i].formal_charge

    def hydrogens(self, i: int) -> tuple[int, ...]:
        return tuple(j for j in self.neighbors(i) if self.element(j) == 1)

    def order_sum(self, i: int) -> float:
        return sum(order_valence(self.mol.bond_between(i, j).order) for j in self.neighbors(i))

    def bond_count(self, i: int) -> int:
        return len(self.neighbors(i))

    def free_valence(self, i: int) -> float:
        return MAX_VALENCE[self.element(i)] - self.order_sum(i)

    def heavy_neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(j for j in self.neighbors(i) if self.element(j) != 1)

    def is_carbonyl_carbon(self, i: int) -> bool:
        return self.element(i) == 6 and any(
            self.element(j) == 8 and self.mol.bond_between(i, j).order == DOUBLE
            for j in self.neighbors(i)
        )

    def is_sulfonyl_sulfur(self, i: int) -> bool:
        if self.element(i) != 16:
            return False
        return (
            sum(
                1
                for j in self.neighbors(i)
                if self.element(j) == 8 and self.mol.bond_between(i, j).order == DOUBLE
            )
            >= 2
        )

    def is_amide_nitrogen(self, i: int) -> bool:
        return self.element(i) == 7 and any(
            self.is_carbonyl_carbon(j) or self.is_sulfonyl_sulfur(j)
            for j in self.heavy_neighbors(i)
        )

    def donors(self) -> tuple[int, ...]:
        """N/O with an explicit H; without any hydrogens, N/O with free valence."""
        out = []
        for i in sorted(self.member):
            if self.element(i) not in (7, 8):
                continue
            if self.hydrogens(i):
                out.append(i)
            elif not self.has_h and self.free_valence(i) > 0:
                out.append(i)
        return tuple(out)

    def acceptors(self) -> tuple[int, ...]:
        """O (non-positive charge) and lone-pair N (non-amide, order sum <= 3)."""
        out = []
        for i in sorted(self.member):
            elem = self.element(i)
            if self.charge(i) > 0:
                continue
            if elem == 8:
                out.append(i)
            elif elem == 7 and not self.is_amide_nitrogen(i) and self.order_sum(i) <= 3.0:
                out.append(i)
        return tuple(out)

    def hydrophobic_carbons(self) -> tuple[int, ...]:
        out = []
        for i in sorted(self.member):
            if self.element(i) != 6:
                continue
            if all(self.element(j) in (1, 6, 16) for j in self.neighbors(i)):
                out.append(i)
        return tuple(out)

    def aromatic_ring_atom_sets(self) -> tuple[tuple[int, ...], ...]:
        from .chem import aromatic_rings

        rings = []
        for ring in aromatic_rings(self.mol):
            if all(i in self.member for i in ring):
                rings.append(tuple(sorted(ring)))
        return tuple(rings)

    def charged_groups(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        """(sign, atom tuple) groups: carboxylate-like, guanidinium, ammonium,
        plus formally charged singletons."""
        groups: list[tuple[int, tuple[int, ...]]] = []
        claimed: set[int] = set()
        for i in sorted(self.member):
            elem = self.element(i)
            terminal_o = [
                j
                for j in self.heavy_neighbors(i)
                if self.element(j) == 8 and len(self.heavy_neighbors(j)) == 1
            ]
            # Carboxylate needs two terminal oxygens; sulfonate/phosphate need
            # three so that sulfones and sulfonamides stay neutral.
            if (elem == 6 and len(terminal_o) == 2) or (
                elem in (15, 16) and len(terminal_o) >= 3
            ):
                groups.append((-1, tuple(sorted(terminal_o))))
                claimed.update(terminal_o)
                claimed.add(i)
                continue
            if elem == 6 and not self.mol.in_ring(i):
                guanidine_n = [
                    j
                    for j in self.heavy_neighbors(i)
                    if self.element(j) == 7
                    and len(self.heavy_neighbors(j)) <= 2
                    and not self.mol.in_ring(j)
                ]
                if len(guanidine_n) == 3 and len(self.heavy_neighbors(i)) == 3:
                    groups.append((1, tuple(sorted(guanidine_n))))
                    claimed.update(guanidine_n)
                    claimed.add(i)
        for i in sorted(self.member):
            if i in claimed:
                continue
            elem = self.element(i)
            if elem == 7 and (self.charge(i) > 0 or self.bond_count(i) == 4):
                groups.append((1, (i,)))
            elif self.charge(i) > 0:
                groups.append((1, (i,)))
            elif self.charge(i) < 0:
                groups.append((-1, (i,)))
        return tuple(groups)


def molecule_donors(mol: MoleculeGraph) -> tuple[int, ...]:
    """Hydrogen-bond donor atoms of a whole molecule, arm conventions."""
    return _ArmView(Fragment.from_molecule(mol)).donors()


def molecule_acceptors(mol: MoleculeGraph) -> tuple[int, ...]:
    """Hydrogen-bond acceptor atoms of a whole molecule, arm conventions."""
    return _ArmView(Fragment.from_molecule(mol)).acceptors()


# --- protein-side typing (residue/atom-name templates) ----------------------

_STANDARD_RESIDUES = frozenset(
    "ALA ARG ASN ASP CYS GLN GLU GLY HIS ILE LEU LYS MET PHE PRO SER THR TRP TYR VAL".split()
)

# Side-chain donor atom names when hydrogens are absent from the file.
_DONOR_TEMPLATE = {
    "SER": ("OG",),
    "THR": ("OG1",),
    "TYR": ("OH",),
    "ASN": ("ND2",),
    "GLN": ("NE2",),
    "TRP": ("NE1",),
    "HIS": ("ND1", "NE2"),
    "ARG": ("NE", "NH1", "NH2"),
    "LYS": ("NZ",),
}

# Acceptor atom names; the backbone O is an acceptor for every residue.
_ACCEPTOR_TEMPLATE = {
    "ASP": ("OD1", "OD2"),
    "GLU": ("OE1", "OE2"),
    "ASN": ("OD1",),
    "GLN": ("OE1",),
    "SER": ("OG",),
    "THR": ("OG1",),
    "TYR": ("OH",),
    "HIS": ("ND1", "NE2"),
}

_RING_TEMPLATE = {
    "PHE": (("CG", "CD1", "CD2", "CE1", "CE2", "CZ"),),
    "TYR": (("CG", "CD1", "CD2", "CE1", "CE2", "CZ"),),
    "HIS": (("CG", "ND1", "CD2", "CE1", "NE2"),),
    "TRP": (
        ("CG", "CD1", "NE1", "CE2", "CD2"),
        ("CD2", "CE2", "CZ2", "CH2", "CZ3", "CE3"),
    ),
}

_CHARGED_TEMPLATE = {
    "ASP": (-1, ("OD1", "OD2")),
    "GLU": (-1, ("OE1", "OE2")),
    "LYS": (1, ("NZ",)),
    "ARG": (1, ("NE", "NH1", "NH2")),
}


class _ProteinView:
    def __init__(self, protein: ProteinStructure):
        self.protein = protein
        self.nonsolvent = tuple(a.index for a in protein.atoms if not a.is_solvent)
        self.waters = tuple(
            a.index for a in protein.atoms if a.is_solvent and a.element == 8
        )

    def element(self, i: int) -> int:
        return self.protein.atoms[i].element

    def hydrogens(self, i: int) -> tuple[int, ...]:
        return tuple(
            j for j in self.protein.adjacency[i] if self.protein.atoms[j].element == 1
        )

    def donors(self) -> tuple[int, ...]:
        """Explicit-H donors, else template donors (backbone N except proline,
        plus side-chain names)."""
        out = []
        for i in self.nonsolvent:
            atom = self.protein.atoms[i]
            if atom.element not in (7, 8):
                continue
            if self.hydrogens(i):
                out.append(i)
                continue
            if atom.atom_name == "N" and atom.res_name != "PRO":
                out.append(i)
                continue
            if atom.atom_name in _DONOR_TEMPLATE.get(atom.res_name, ()):
                out.append(i)
        return tuple(out)

    def acceptors(self) -> tuple[int, ...]:
        """Backbone carbonyl O plus template names; any oxygen of an unknown
        residue counts, nitrogens never do without a template entry."""
        out = []
        for i in self.nonsolvent:
            atom = self.protein.atoms[i]
            if atom.element == 8:
                if atom.atom_name in ("O", "OXT"):
                    out.append(i)
                elif atom.atom_name in _ACCEPTOR_TEMPLATE.get(atom.res_name, ()):
                    out.append(i)
                elif atom.res_name not in _STANDARD_RESIDUES:
                    out.append(i)
            elif atom.element == 7:
                if atom.atom_name in _ACCEPTOR_TEMPLATE.get(atom.res_name, ()):
                    out.append(i)
        return tuple(out)

    def hydrophobic_carbons(self) -> tuple[int, ...]:
        out = []
        for i in self.nonsolvent:
            if self.element(i) != 6:
                continue
            nbrs = self.protein.adjacency[i]
            if all(self.protein.atoms[j].element in (1, 6, 16) for j in nbrs):
                out.append(i)
        return tuple(out)

    def rings(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for res in self.protein.residues:
            for names in _RING_TEMPLATE.get(res.name, ()):
                table = {self.protein.atoms[i].atom_name: i for i in res.atom_indices}
                if all(n in table for n in names):
                    out.append(tuple(table[n] for n in names))
        return tuple(out)

    def charged_groups(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        out = []
        for res in self.protein.residues:
            entry = _CHARGED_TEMPLATE.get(res.name)
            if entry is None:
                continue
            sign, names = entry
            table = {self.protein.atoms[i].atom_name: i for i in res.atom_indices}
            if all(n in table for n in names):
                out.append((sign, tuple(table[n] for n in names)))
        return tuple(out)


# --- detectors --------------------------------------------------------------


def detect_interactions(
    protein: ProteinStructure,
    arm: Fragment,
    thresholds: InteractionThresholds = DEFAULT_THRESHOLDS,
) -> InteractionProfile:
    """Run all seven detectors and return the profile.

    Records are ordered by kind (enumeration order), then ligand atom tuple,
    then protein atom tuple; an empty profile is a valid result.
    """
    lig = _ArmView(arm)
    prot = _ProteinView(protein)
    pxyz = protein.coords
    lxyz = arm.parent.coords

    records: list[InteractionRecord] = []
    records.extend(_detect_hbonds(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_hydrophobic(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_pi_stacking(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_salt_bridges(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_water_bridges(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_halogen_bonds(lig, prot, lxyz, pxyz, thresholds))
    records.extend(_detect_pi_cation(lig, prot, lxyz, pxyz, thresholds))

    rank = {kind: k for k, kind in enumerate(INTERACTION_KINDS)}
    records.sort(key=lambda r: (rank[r.kind], r.ligand_atoms, r.protein_atoms))
    counts = tuple(
        sum(1 for r in records if r.kind == kind) for kind in INTERACTION_KINDS
    )
    return InteractionProfile(counts=counts, records=tuple(records))


def _detect_hbonds(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    out = []
    seen: set[tuple[int, int]] = set()

    def try_pair(donor_xyz, acc_xyz, h_indices, hxyz_source):
        d = float(np.linalg.norm(donor_xyz - acc_xyz))
        if d > th.hbond_distance:
            return None
        if h_indices:
            best = -1.0
            for h in h_indices:
                hx = hxyz_source[h]
                best = max(best, _angle_deg(donor_xyz - hx, acc_xyz - hx))
            if best < th.hbond_angle:
                return None
            return (("distance", d), ("angle", best))
        return (("distance", d),)

    for dn in lig.donors():
        for ac in prot.acceptors():
            geo = try_pair(lxyz[dn], pxyz[ac], lig.hydrogens(dn), lxyz)
            if geo is not None and (dn, ac) not in seen:
                seen.add((dn, ac))
                out.append(InteractionRecord("hbond", (dn,), (ac,), geo))
    for dn in prot.donors():
        for ac in lig.acceptors():
            geo = try_pair(pxyz[dn], lxyz[ac], prot.hydrogens(dn), pxyz)
            if geo is not None and (ac, dn) not in seen:
                seen.add((ac, dn))
                out.append(InteractionRecord("hbond", (ac,), (dn,), geo))
    return out


def _detect_hydrophobic(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    lc = lig.hydrophobic_carbons()
    pc = prot.hydrophobic_carbons()
    if not lc or not pc:
        return []
    dist = pairwise_distances(lxyz[list(lc)], pxyz[list(pc)])
    best: dict[tuple[int, tuple], tuple[float, int, int]] = {}
    for a, i in enumerate(lc):
        for b, j in enumerate(pc):
            d = float(dist[a, b])
            if d > th.hydrophobic_distance:
                continue
            res_key = prot.protein.atoms[j].residue_key
            cand = (d, i, j)
            key = (i, res_key)
            if key not in best or cand < best[key]:
                best[key] = cand
    out = []
    for d, i, j in best.values():
        out.append(
            InteractionRecord("hydrophobic", (i,), (j,), (("distance", d),))
        )
    return out


def _detect_pi_stacking(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    out = []
    for lring in lig.aromatic_ring_atom_sets():
        lpts = lxyz[list(lring)]
        lcen, lnorm = lpts.mean(axis=0), _plane_normal(lpts)
        for pring in prot.rings():
            ppts = pxyz[list(pring)]
            pcen, pnorm = ppts.mean(axis=0), _plane_normal(ppts)
            d = float(np.linalg.norm(lcen - pcen))
            if d > th.stack_centroid:
                continue
            angle = _angle_deg(lnorm, pnorm)
            angle = min(angle, 180.0 - angle)
            v = pcen - lcen
            off1 = float(np.linalg.norm(v - np.dot(v, lnorm) * lnorm))
            off2 = float(np.linalg.norm(v - np.dot(v, pnorm) * pnorm))
            offset = max(off1, off2)
            if angle <= th.stack_parallel_angle:
                if offset <= th.stack_offset:
                    geo = (("distance", d), ("angle", angle), ("offset", offset))
                    out.append(InteractionRecord("pi_stacking", lring, tuple(sorted(pring)), geo))
            elif th.stack_t_angle_lo <= angle <= th.stack_t_angle_hi:
                geo = (("distance", d), ("angle", angle))
                out.append(InteractionRecord("pi_stacking", lring, tuple(sorted(pring)), geo))
    return out


def _detect_salt_bridges(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    out = []
    for lsign, latoms in lig.charged_groups():
        lcen = lxyz[list(latoms)].mean(axis=0)
        for psign, patoms in prot.charged_groups():
            if lsign * psign >= 0:
                continue
            pcen = pxyz[list(patoms)].mean(axis=0)
            d = float(np.linalg.norm(lcen - pcen))
            if d <= th.salt_distance:
                out.append(
                    InteractionRecord(
                        "salt_bridge", latoms, tuple(sorted(patoms)), (("distance", d),)
                    )
                )
    return out


def _detect_water_bridges(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    lig_polar = tuple(i for i in sorted(lig.member) if lig.element(i) in (7, 8))
    prot_polar = tuple(i for i in prot.nonsolvent if prot.element(i) in (7, 8))
    out = []
    for w in prot.waters:
        wx = pxyz[w]
        near_l = [
            i for i in lig_polar if np.linalg.norm(lxyz[i] - wx) <= th.water_distance
        ]
        near_p = [
            j for j in prot_polar if np.linalg.norm(pxyz[j] - wx) <= th.water_distance
        ]
        best = None
        for i in near_l:
            for j in near_p:
                angle = _angle_deg(lxyz[i] - wx, pxyz[j] - wx)
                if not (th.water_angle_lo <= angle <= th.water_angle_hi):
                    continue
                d1 = float(np.linalg.norm(lxyz[i] - wx))
                d2 = float(np.linalg.norm(pxyz[j] - wx))
                cand = (d1 + d2, i, j, d1, d2, angle)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            _, i, j, d1, d2, angle = best
            geo = (
                ("ligand_water_distance", d1),
                ("protein_water_distance", d2),
                ("angle", angle),
            )
            out.append(InteractionRecord("water_bridge", (i,), (j, w), geo))
    return out


def _detect_halogen_bonds(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    acceptors = tuple(i for i in prot.nonsolvent if prot.element(i) in (7, 8, 16))
    out = []
    for x in sorted(lig.member):
        if lig.element(x) not in _HALOGENS:
            continue
        carbons = [j for j in lig.heavy_neighbors(x) if lig.element(j) == 6]
        if not carbons:
            continue
        for a in acceptors:
            d = float(np.linalg.norm(lxyz[x] - pxyz[a]))
            if d > th.halogen_distance:
                continue
            angle = max(_angle_deg(lxyz[c] - lxyz[x], pxyz[a] - lxyz[x]) for c in carbons)
            if angle >= th.halogen_angle:
                out.append(
                    InteractionRecord(
                        "halogen_bond", (x,), (a,), (("distance", d), ("angle", angle))
                    )
                )
    return out


def _detect_pi_cation(lig, prot, lxyz, pxyz, th) -> list[InteractionRecord]:
    out = []
    for lring in lig.aromatic_ring_atom_sets():
        lcen = lxyz[list(lring)].mean(axis=0)
        for psign, patoms in prot.charged_groups():
            if psign <= 0:
                continue
            pcen = pxyz[list(patoms)].mean(axis=0)
            d = float(np.linalg.norm(lcen - pcen))
            if d <= th.cation_distance:
                out.append(
                    InteractionRecord(
                        "pi_cation", lring, tuple(sorted(patoms)), (("distance", d),)
                    )
                )
    for lsign, latoms in lig.charged_groups():
        if lsign <= 0:
            continue
        lcen = lxyz[list(latoms)].mean(axis=0)
        for pring in prot.rings():
            pcen = pxyz[list(pring)].mean(axis=0)
            d = float(np.linalg.norm(lcen - pcen))
            if d <= th.cation_distance:
                out.append(
                    InteractionRecord(
                        "pi_cation", latoms, tuple(sorted(pring)), (("distance", d),)
                    )
                )
    return out
