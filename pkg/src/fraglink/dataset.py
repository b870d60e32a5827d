"""Subpocket-arm pair dataset: construction, persistence, and splitting.

Each pair stores a posed arm, a sliced protein context, and the concept
labels computed against that context. The context slice is the label oracle:
re-running the spatial-factor and interaction ops on the stored structures
must reproduce the stored labels bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chem import (
    AtomRecord,
    BondRecord,
    MoleculeGraph,
    ProteinAtom,
    ProteinStructure,
    graph_key,
)
from .fragment import DecompositionError, Fragment, decompose, fragment_molecule
from .geom import pairwise_distances
from .interactions import (
    INTERACTION_KINDS,
    DEFAULT_THRESHOLDS,
    InteractionThresholds,
    detect_interactions,
)
from .pocket import (
    DEFAULT_POCKET_CONFIG,
    EmptySubpocketError,
    PocketConfig,
    Subpocket,
    compute_spatial_factors,
    extract_subpocket,
    SpatialFactors,
)

__all__ = [
    "SCHEMA_VERSION",
    "CONTEXT_RADIUS",
    "DatasetError",
    "SchemaError",
    "SplitError",
    "Provenance",
    "PairSample",
    "build_pairs",
    "ligand_decomposition",
    "slice_context",
    "split_by_protein",
    "save_jsonl",
    "load_jsonl",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Protein atoms within this range of the arm (whole residues, waters kept)
# form the stored context; every detector and the subpocket rule reach less.
CONTEXT_RADIUS = 10.0


class DatasetError(Exception):
    """Dataset construction or persistence failed."""


class SchemaError(DatasetError):
    """A stored line does not carry the supported schema version."""


class SplitError(DatasetError):
    """Too few distinct complexes to split."""


@dataclass(frozen=True)
class Provenance:
    """Where a pair came from: complex id plus decomposition metadata."""

    complex_id: str
    arm_index: int
    source_count: int  # fragments merged into this arm
    rules: tuple[str, ...]  # cleavage rules at the arm's attachment points


@dataclass(frozen=True)
class PairSample:
    """One subpocket-arm pair with its concept labels.

    ``arm`` is a standalone fragment posed in the complex frame; ``context``
    is the sliced protein around it. The subpocket is not stored: extraction
    is deterministic, so it is rebuilt on demand from these two structures.
    """

    arm: Fragment
    context: ProteinStructure
    spatial_true: SpatialFactors
    interaction_counts: tuple[int, ...]
    provenance: Provenance

    def __post_init__(self):
        if len(self.interaction_counts) != len(INTERACTION_KINDS):
            raise ValueError("interaction_counts must have one entry per kind")
        if any(c < 0 for c in self.interaction_counts):
            raise ValueError("interaction counts must be non-negative")

    def subpocket(self, config: PocketConfig = DEFAULT_POCKET_CONFIG) -> Subpocket:
        return extract_subpocket(
            self.context, self.arm, config, subpocket_id=self.provenance.arm_index
        )


def slice_context(
    protein: ProteinStructure, arm: Fragment, radius: float = CONTEXT_RADIUS
) -> ProteinStructure:
    """Whole residues (solvent included) with any atom near the arm."""
    heavy = arm.heavy_coords()
    if len(heavy) == 0:
        raise DatasetError("cannot slice a context around an arm with no heavy atoms")
    dmin = pairwise_distances(protein.coords, heavy).min(axis=1)
    keep: set[int] = set()
    for res in protein.residues:
        if any(dmin[i] <= radius for i in res.atom_indices):
            keep.update(res.atom_indices)
    return protein.subset(sorted(keep))


def ligand_decomposition(
    protein: ProteinStructure,
    ligand: MoleculeGraph,
    config: PocketConfig = DEFAULT_POCKET_CONFIG,
):
    """Cleave the ligand and assign its fragments against provisional
    subpockets, one per fragment; raises DatasetError when no fragment sits
    near the protein."""
    frags, _ = fragment_molecule(ligand)
    provisional = []
    for c, frag in enumerate(frags):
        try:
            provisional.append(extract_subpocket(protein, frag, config, subpocket_id=c))
        except EmptySubpocketError:
            continue
    if not provisional:
        raise DatasetError("no protein atoms near any fragment")
    return decompose(ligand, provisional)


def build_pairs(
    complexes: Iterable[tuple[str, ProteinStructure, MoleculeGraph]],
    config: PocketConfig = DEFAULT_POCKET_CONFIG,
    thresholds: InteractionThresholds = DEFAULT_THRESHOLDS,
    context_radius: float = CONTEXT_RADIUS,
    deduplicate: bool = True,
) -> list[PairSample]:
    """Fragment, decompose, and label every complex into subpocket-arm pairs.

    Per complex: cleave the ligand, give every fragment its own provisional
    subpocket, assign and merge fragments into arms, then re-extract a
    subpocket around each merged arm inside a sliced context and compute the
    concept labels there. Complexes that yield no arm are skipped with a
    logged reason; exact duplicates by (arm graph, subpocket residues) are
    dropped when ``deduplicate`` is set. Output order follows input order.
    """
    samples: list[PairSample] = []
    seen: set[tuple] = set()
    for complex_id, protein, ligand in complexes:
        try:
            decomp = ligand_decomposition(protein, ligand, config)
        except (DatasetError, DecompositionError) as err:
            log.warning("skipping %s: %s", complex_id, err)
            continue
        for arm_index, assignment in enumerate(decomp.arms):
            context = slice_context(protein, assignment.fragment, context_radius)
            arm = assignment.fragment.standalone()
            try:
                subpocket = extract_subpocket(context, arm, config, subpocket_id=arm_index)
            except EmptySubpocketError as err:
                log.warning("skipping arm %d of %s: %s", arm_index, complex_id, err)
                continue
            sample = PairSample(
                arm=arm,
                context=context,
                spatial_true=compute_spatial_factors(subpocket, arm),
                interaction_counts=detect_interactions(context, arm, thresholds).counts,
                provenance=Provenance(
                    complex_id=complex_id,
                    arm_index=arm_index,
                    source_count=assignment.source_count,
                    rules=tuple(rule for _, rule in arm.attachment_points),
                ),
            )
            if deduplicate:
                key = (graph_key(arm.parent), subpocket.residue_keys())
                if key in seen:
                    log.debug("dropping duplicate pair from %s", complex_id)
                    continue
                seen.add(key)
            samples.append(sample)
    return samples


def split_by_protein(
    samples: Sequence[PairSample], fraction: float, seed: int = 0
) -> tuple[list[PairSample], list[PairSample]]:
    """Train/test split that keeps every complex id on exactly one side."""
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"test fraction must be in (0, 1), got {fraction}")
    ids = sorted({s.provenance.complex_id for s in samples})
    if len(ids) < 2:
        raise SplitError("need at least 2 distinct complex ids to split")
    rng = np.random.default_rng(seed)
    order = [ids[k] for k in rng.permutation(len(ids))]
    n_test = min(max(round(fraction * len(ids)), 1), len(ids) - 1)
    test_ids = set(order[:n_test])
    train = [s for s in samples if s.provenance.complex_id not in test_ids]
    test = [s for s in samples if s.provenance.complex_id in test_ids]
    return train, test


# --- JSON Lines persistence --------------------------------------------------


def _molecule_to_obj(mol: MoleculeGraph) -> dict:
    return {
        "name": mol.name,
        "atoms": [
            [a.element, list(a.position), a.formal_charge, a.is_aromatic]
            for a in mol.atoms
        ],
        "bonds": [[b.a, b.b, b.order] for b in mol.bonds],
    }


def _molecule_from_obj(obj: dict) -> MoleculeGraph:
    atoms = tuple(
        AtomRecord(
            index=k,
            element=element,
            position=tuple(pos),
            formal_charge=charge,
            is_aromatic=aromatic,
        )
        for k, (element, pos, charge, aromatic) in enumerate(obj["atoms"])
    )
    bonds = tuple(BondRecord(a, b, order) for a, b, order in obj["bonds"])
    return MoleculeGraph(atoms=atoms, bonds=bonds, name=obj["name"])


def _protein_to_obj(protein: ProteinStructure) -> dict:
    return {
        "name": protein.name,
        "atoms": [
            [
                a.element,
                list(a.position),
                a.atom_name,
                a.res_name,
                a.res_seq,
                a.chain_id,
                a.formal_charge,
                a.is_solvent,
            ]
            for a in protein.atoms
        ],
    }


def _protein_from_obj(obj: dict) -> ProteinStructure:
    atoms = tuple(
        ProteinAtom(
            index=k,
            element=element,
            position=tuple(pos),
            atom_name=atom_name,
            res_name=res_name,
            res_seq=res_seq,
            chain_id=chain_id,
            formal_charge=charge,
            is_solvent=solvent,
        )
        for k, (element, pos, atom_name, res_name, res_seq, chain_id, charge, solvent)
        in enumerate(obj["atoms"])
    )
    return ProteinStructure(atoms=atoms, name=obj["name"])


def _sample_to_obj(sample: PairSample) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "arm": {
            "molecule": _molecule_to_obj(sample.arm.parent),
            "attachments": [[i, rule] for i, rule in sample.arm.attachment_points],
        },
        "context": _protein_to_obj(sample.context),
        "spatial_true": [
            sample.spatial_true.nonpolar_occupation,
            sample.spatial_true.surface_complementarity,
        ],
        "interaction_counts": list(sample.interaction_counts),
        "provenance": asdict(sample.provenance) | {"rules": list(sample.provenance.rules)},
    }


def _sample_from_obj(obj: dict) -> PairSample:
    if obj.get("schema") != SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported schema {obj.get('schema')!r}, expected {SCHEMA_VERSION}"
        )
    molecule = _molecule_from_obj(obj["arm"]["molecule"])
    arm = Fragment(
        parent=molecule,
        atom_indices=tuple(range(len(molecule.atoms))),
        attachment_points=tuple((i, rule) for i, rule in obj["arm"]["attachments"]),
    )
    prov = obj["provenance"]
    occupation, complementarity = obj["spatial_true"]
    return PairSample(
        arm=arm,
        context=_protein_from_obj(obj["context"]),
        spatial_true=SpatialFactors(
            nonpolar_occupation=occupation, surface_complementarity=complementarity
        ),
        interaction_counts=tuple(obj["interaction_counts"]),
        provenance=Provenance(
            complex_id=prov["complex_id"],
            arm_index=prov["arm_index"],
            source_count=prov["source_count"],
            rules=tuple(prov["rules"]),
        ),
    )


def save_jsonl(samples: Sequence[PairSample], path: str | Path) -> None:
    """One compact JSON object per line; key order fixed for reproducibility."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(_sample_to_obj(sample), sort_keys=True))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[PairSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}:{line_no}: not valid JSON: {err}") from err
            samples.append(_sample_from_obj(obj))
    return samples
