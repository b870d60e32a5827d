"""Distribution, diversity, and drug-likeness metrics for generated sets.

Bond-length fidelity is measured per (element pair, bond order) key with a
Jensen-Shannon divergence over a fixed histogram; diversity is one minus the
mean pairwise Tanimoto similarity of path fingerprints. Drug-likeness and
synthesizability are declared proxies with all constants in this module, not
re-implementations of the published scores.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chem import SINGLE, MoleculeGraph, free_valence, has_hydrogens, perceive_rings
from .interactions import molecule_acceptors, molecule_donors

__all__ = [
    "FINGERPRINT_BITS",
    "JSD_BINS",
    "JSD_RANGE",
    "JSD_SMOOTHING",
    "MAX_PATH_ATOMS",
    "QED_TARGETS",
    "BondDistanceKey",
    "MetricError",
    "MetricReport",
    "bond_distance_jsd",
    "bond_keys",
    "bond_lengths",
    "desirability",
    "evaluate_molecules",
    "fingerprint",
    "hetero_fraction",
    "jensen_shannon",
    "jsd_table",
    "molecular_weight",
    "qed_lite",
    "report_to_dict",
    "rotatable_bonds",
    "sa_proxy",
    "save_report_csv",
    "save_report_json",
    "tanimoto",
    "tanimoto_diversity",
]

JSD_BINS = 150
JSD_RANGE = (0.5, 3.5)  # Angstrom window covering covalent bond lengths
JSD_SMOOTHING = 1e-8  # per-bin additive weight so empty bins stay finite

FINGERPRINT_BITS = 2048
MAX_PATH_ATOMS = 7

# Standard atomic weights, three decimals.
_ATOMIC_MASS = {
    1: 1.008, 5: 10.811, 6: 12.011, 7: 14.007, 8: 15.999, 9: 18.998,
    15: 30.974, 16: 32.060, 17: 35.453, 35: 79.904, 53: 126.904,
}

# Desirability targets (center, width) for the drug-likeness proxy.
QED_TARGETS = {
    "weight": (300.0, 150.0),
    "hetero_fraction": (0.25, 0.15),
    "donors": (1.0, 2.0),
    "acceptors": (3.0, 3.0),
    "rotatable": (4.0, 4.0),
}

# Complexity weights for the synthesizability proxy.
_RING_WEIGHT = 0.15
_FUSED_WEIGHT = 0.25
_HETERO_WEIGHT = 0.05
_SIZE_WEIGHT = 0.02
_SIZE_FLOOR = 20  # heavy atoms granted before the size penalty starts


class MetricError(ValueError):
    """Invalid metric inputs (bad key, malformed probability vector)."""


# ---------------------------------------------------------------------------
# Bond distance distributions


@dataclass(frozen=True, order=True)
class BondDistanceKey:
    """Unordered element pair plus bond-order category."""

    elem_lo: int
    elem_hi: int
    order: int

    def __post_init__(self):
        if self.elem_lo > self.elem_hi:
            raise MetricError("element pair must be ordered low-high")

    @classmethod
    def from_bond(cls, mol: MoleculeGraph, a: int, b: int, order: int) -> "BondDistanceKey":
        e1, e2 = mol.atoms[a].element, mol.atoms[b].element
        return cls(elem_lo=min(e1, e2), elem_hi=max(e1, e2), order=order)

    @property
    def label(self) -> str:
        return f"{self.elem_lo}-{self.elem_hi}|{self.order}"


def bond_keys(mols: Sequence[MoleculeGraph]) -> tuple[BondDistanceKey, ...]:
    """Sorted distinct keys present in a molecule set."""
    keys = {
        BondDistanceKey.from_bond(mol, bond.a, bond.b, bond.order)
        for mol in mols
        for bond in mol.bonds
    }
    return tuple(sorted(keys))


def bond_lengths(mols: Sequence[MoleculeGraph], key: BondDistanceKey) -> np.ndarray:
    """Every bond length matching ``key``, in input order."""
    out = []
    for mol in mols:
        coords = mol.coords
        for bond in mol.bonds:
            if BondDistanceKey.from_bond(mol, bond.a, bond.b, bond.order) == key:
                out.append(float(np.linalg.norm(coords[bond.a] - coords[bond.b])))
    return np.array(out, dtype=np.float64)


def _smoothed_histogram(lengths: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(lengths, bins=JSD_BINS, range=JSD_RANGE)
    weights = counts.astype(np.float64) + JSD_SMOOTHING
    return weights / weights.sum()


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JSD with natural logarithms; inputs are probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise MetricError("probability vectors must share one dimension")
    if np.any(p < 0) or np.any(q < 0):
        raise MetricError("probabilities must be non-negative")
    for v in (p, q):
        if abs(float(v.sum()) - 1.0) > 1e-9:
            raise MetricError("probability vectors must sum to 1")
    m = (p + q) / 2.0

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def bond_distance_jsd(
    ref_mols: Sequence[MoleculeGraph],
    gen_mols: Sequence[MoleculeGraph],
    key: BondDistanceKey,
) -> float | None:
    """JSD between reference and generated length distributions for one key.

    ``None`` marks an undefined metric (no matching bonds on one side);
    callers must not fold it into averages as a zero.
    """
    ref = bond_lengths(ref_mols, key)
    gen = bond_lengths(gen_mols, key)
    if len(ref) == 0 or len(gen) == 0:
        return None
    return jensen_shannon(_smoothed_histogram(ref), _smoothed_histogram(gen))


def jsd_table(
    ref_mols: Sequence[MoleculeGraph], gen_mols: Sequence[MoleculeGraph]
) -> dict[BondDistanceKey, float | None]:
    """Per-key JSD over the union of keys seen on either side."""
    keys = sorted(set(bond_keys(ref_mols)) | set(bond_keys(gen_mols)))
    return {key: bond_distance_jsd(ref_mols, gen_mols, key) for key in keys}


# ---------------------------------------------------------------------------
# Fingerprints and diversity


def _heavy_path_strings(mol: MoleculeGraph) -> set[str]:
    heavy = [a.index for a in mol.atoms if a.element != 1]
    nbrs = {
        i: [j for j in mol.neighbors(i) if mol.atoms[j].element != 1] for i in heavy
    }
    seen: set[str] = set()

    def walk(path: list[int], tokens: list[str]) -> None:
        forward = ":".join(tokens)
        backward = ":".join(reversed(tokens))
        seen.add(min(forward, backward))
        if (len(tokens) + 1) // 2 >= MAX_PATH_ATOMS:
            return
        for j in nbrs[path[-1]]:
            if j in path:
                continue
            order = mol.bond_between(path[-1], j).order
            walk(path + [j], tokens + [str(order), str(mol.atoms[j].element)])

    for i in heavy:
        walk([i], [str(mol.atoms[i].element)])
    return seen


def fingerprint(mol: MoleculeGraph) -> frozenset[int]:
    """Bits set by hashed linear heavy-atom paths of 1 to 7 atoms.

    Paths are read in whichever direction is lexicographically smaller, so
    the bits never depend on atom numbering.
    """
    return frozenset(
        int(hashlib.md5(s.encode()).hexdigest(), 16) % FINGERPRINT_BITS
        for s in _heavy_path_strings(mol)
    )


def tanimoto(a: frozenset[int], b: frozenset[int]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def tanimoto_diversity(mols: Sequence[MoleculeGraph]) -> float | None:
    """1 minus the mean pairwise Tanimoto similarity; None below two inputs."""
    if len(mols) < 2:
        return None
    prints = [fingerprint(m) for m in mols]
    sims = [
        tanimoto(prints[i], prints[j])
        for i in range(len(prints))
        for j in range(i + 1, len(prints))
    ]
    return 1.0 - math.fsum(sims) / len(sims)


# ---------------------------------------------------------------------------
# Drug-likeness and synthesizability proxies


def _implicit_hydrogens(mol: MoleculeGraph, i: int) -> int:
    allowed = free_valence(mol, i) + mol.atoms[i].formal_charge
    return max(0, math.floor(allowed + 1e-9))


def molecular_weight(mol: MoleculeGraph) -> float:
    """Mass including hydrogens; implicit ones are filled from free valence
    (shifted by formal charge) when the graph carries no explicit hydrogen."""
    total = math.fsum(_ATOMIC_MASS[a.element] for a in mol.atoms)
    if not has_hydrogens(mol):
        total += _ATOMIC_MASS[1] * sum(
            _implicit_hydrogens(mol, a.index) for a in mol.atoms
        )
    return total


def hetero_fraction(mol: MoleculeGraph) -> float:
    heavy = [a for a in mol.atoms if a.element != 1]
    if not heavy:
        return 0.0
    return sum(1 for a in heavy if a.element != 6) / len(heavy)


def rotatable_bonds(mol: MoleculeGraph) -> int:
    """Acyclic single bonds between non-terminal heavy atoms."""
    heavy_degree = {
        a.index: sum(1 for j in mol.neighbors(a.index) if mol.atoms[j].element != 1)
        for a in mol.atoms
    }
    count = 0
    for bond in mol.bonds:
        if bond.order != SINGLE or bond.key in mol.ring_bonds:
            continue
        if mol.atoms[bond.a].element == 1 or mol.atoms[bond.b].element == 1:
            continue
        if heavy_degree[bond.a] >= 2 and heavy_degree[bond.b] >= 2:
            count += 1
    return count


def desirability(value: float, center: float, width: float) -> float:
    """Gaussian desirability, 1.0 at the center."""
    return math.exp(-((value - center) ** 2) / (2.0 * width**2))


def qed_lite(mol: MoleculeGraph) -> float:
    """Geometric mean of five Gaussian desirability terms, in [0, 1]."""
    values = {
        "weight": molecular_weight(mol),
        "hetero_fraction": hetero_fraction(mol),
        "donors": float(len(molecule_donors(mol))),
        "acceptors": float(len(molecule_acceptors(mol))),
        "rotatable": float(rotatable_bonds(mol)),
    }
    product = 1.0
    for name, value in values.items():
        center, width = QED_TARGETS[name]
        product *= desirability(value, center, width)
    return product ** (1.0 / len(values))


def _fused_ring_pairs(rings: Sequence[tuple[int, ...]]) -> int:
    edge_sets = []
    for ring in rings:
        edges = set()
        for k in range(len(ring)):
            a, b = ring[k], ring[(k + 1) % len(ring)]
            edges.add((min(a, b), max(a, b)))
        edge_sets.append(edges)
    return sum(
        1
        for i in range(len(edge_sets))
        for j in range(i + 1, len(edge_sets))
        if edge_sets[i] & edge_sets[j]
    )


def sa_proxy(mol: MoleculeGraph) -> float:
    """1 minus a clamped complexity sum; higher means easier to make."""
    rings = perceive_rings(mol)
    heavy = [a for a in mol.atoms if a.element != 1]
    hetero = sum(1 for a in heavy if a.element != 6)
    complexity = (
        _RING_WEIGHT * len(rings)
        + _FUSED_WEIGHT * _fused_ring_pairs(rings)
        + _HETERO_WEIGHT * hetero
        + _SIZE_WEIGHT * max(0, len(heavy) - _SIZE_FLOOR)
    )
    return 1.0 - min(1.0, complexity)


# ---------------------------------------------------------------------------
# Aggregate report


@dataclass(frozen=True)
class MetricReport:
    """Evaluation metrics for one generated set against a reference set."""

    jsd: Mapping[str, float | None]
    diversity: float | None
    qed: tuple[float, ...]
    sa: tuple[float, ...]
    docking: tuple[float, ...] = ()
    failures: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for label, value in self.jsd.items():
            if value is not None and not -1e-12 <= value <= math.log(2.0) + 1e-9:
                raise MetricError(f"JSD for {label} outside [0, ln 2]: {value}")
        if self.diversity is not None and not -1e-12 <= self.diversity <= 1.0 + 1e-12:
            raise MetricError(f"diversity outside [0, 1]: {self.diversity}")


def evaluate_molecules(
    ref_mols: Sequence[MoleculeGraph],
    gen_mols: Sequence[MoleculeGraph],
    docking: Sequence[float] = (),
    failures: Mapping[str, int] | None = None,
) -> MetricReport:
    return MetricReport(
        jsd={key.label: value for key, value in jsd_table(ref_mols, gen_mols).items()},
        diversity=tanimoto_diversity(gen_mols),
        qed=tuple(qed_lite(m) for m in gen_mols),
        sa=tuple(sa_proxy(m) for m in gen_mols),
        docking=tuple(docking),
        failures=dict(failures or {}),
    )


def _mean(values: Sequence[float]) -> float | None:
    if not values:
        return None
    return math.fsum(values) / len(values)


def report_to_dict(report: MetricReport) -> dict:
    return {
        "jsd": dict(report.jsd),
        "diversity": report.diversity,
        "qed": {"values": list(report.qed), "mean": _mean(report.qed)},
        "sa": {"values": list(report.sa), "mean": _mean(report.sa)},
        "docking": {"values": list(report.docking), "mean": _mean(report.docking)},
        "failures": dict(report.failures),
    }


def save_report_json(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2) + "\n")


def save_report_csv(report: MetricReport, path: str | Path) -> None:
    """Long-format summary: metric,key,value with repr-rendered floats."""
    rows: list[tuple[str, str, str]] = []
    for label in sorted(report.jsd):
        value = report.jsd[label]
        rows.append(("jsd", label, "undefined" if value is None else repr(value)))
    rows.append(
        ("diversity", "", "undefined" if report.diversity is None else repr(report.diversity))
    )
    for name, values in (("qed", report.qed), ("sa", report.sa), ("docking", report.docking)):
        mean = _mean(values)
        rows.append((name, "mean", "undefined" if mean is None else repr(mean)))
        rows.append((name, "count", str(len(values))))
    for label in sorted(report.failures):
        rows.append(("failures", label, str(report.failures[label])))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "key", "value"))
        writer.writerows(rows)
