"""Subpocket extraction, cavity grids, and the two spatial concepts.

A subpocket is the protein neighborhood an arm occupies: its atoms, a voxel
grid of the hollow space next to them with polarity flags, and a heavy-atom
capacity derived from the cavity volume. The two spatial concepts read off
this geometry: how much of the non-polar cavity the arm fills, and how well
the arm surface hugs the protein surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chem import ProteinStructure, vdw_radius
from .fragment import Fragment
from .geom import canonical_frame, fibonacci_sphere, pairwise_distances

__all__ = [
    "PocketConfig",
    "DEFAULT_POCKET_CONFIG",
    "EmptySubpocketError",
    "Subpocket",
    "SpatialFactors",
    "extract_subpocket",
    "subpocket_from_residues",
    "nonpolar_occupation",
    "surface_complementarity",
    "compute_spatial_factors",
]


@dataclass(frozen=True)
class PocketConfig:
    """Geometry constants for subpocket carving, kept together so ablation
    runs can vary them in one place."""

    pocket_cutoff: float = 6.0  # protein atoms within this range of the arm, Angstrom
    voxel_size: float = 0.5
    shell: float = 4.0  # cavity voxels must lie within this range of pocket atoms
    volume_per_atom: float = 20.0  # cubic Angstrom of cavity granted per heavy atom
    sample_points: int = 92  # sphere design size for complementarity
    sigma: float = 1.5  # Gaussian falloff of the complementarity kernel, Angstrom


DEFAULT_POCKET_CONFIG = PocketConfig()

# Elements whose proximity marks a voxel as non-polar.
_NONPOLAR_ELEMENTS = (6, 16)


class EmptySubpocketError(Exception):
    """No protein atom lies within the pocket cutoff of the arm."""


@dataclass(frozen=True, eq=False)
class Subpocket:
    """Protein atoms around one arm site plus the carved cavity voxels.

    ``protein_atoms`` index into ``protein`` and cover whole residues.
    ``voxel_centers`` is (M, 3); ``voxel_nonpolar`` is a parallel bool array.
    ``capacity`` is the heavy-atom budget implied by the cavity volume.
    """

    id: int
    protein: ProteinStructure
    protein_atoms: tuple[int, ...]
    center: tuple[float, float, float]
    voxel_centers: np.ndarray = field(repr=False)
    voxel_nonpolar: np.ndarray = field(repr=False)
    capacity: int
    config: PocketConfig = DEFAULT_POCKET_CONFIG

    @property
    def atom_coords(self) -> np.ndarray:
        return self.protein.coords[list(self.protein_atoms)]

    def residue_keys(self) -> tuple[tuple[str, int, str], ...]:
        keys = {self.protein.atoms[i].residue_key for i in self.protein_atoms}
        return tuple(sorted(keys))


def extract_subpocket(
    protein: ProteinStructure,
    arm: Fragment,
    config: PocketConfig = DEFAULT_POCKET_CONFIG,
    subpocket_id: int = 0,
) -> Subpocket:
    """Carve the subpocket around an arm pose.

    Protein atoms (solvent excluded) within ``pocket_cutoff`` of any arm heavy
    atom seed the selection, which then expands to whole residues. The cavity
    is the set of voxels on a fixed global lattice that stay within ``shell``
    of the subpocket while lying outside every protein vdW sphere.

    Raises EmptySubpocketError when no protein atom is in range.
    """
    heavy = arm.heavy_coords()
    if len(heavy) == 0:
        raise EmptySubpocketError("arm has no heavy atoms")
    nonsolvent = [a.index for a in protein.atoms if not a.is_solvent]
    if not nonsolvent:
        raise EmptySubpocketError("protein has no non-solvent atoms")
    prot_xyz = protein.coords[nonsolvent]
    dmin = pairwise_distances(prot_xyz, heavy).min(axis=1)
    seeds = {nonsolvent[k] for k in np.nonzero(dmin <= config.pocket_cutoff)[0]}
    if not seeds:
        raise EmptySubpocketError(
            f"no protein atom within {config.pocket_cutoff} A of the arm"
        )
    member: set[int] = set()
    for res in protein.residues:
        if seeds & set(res.atom_indices):
            member.update(i for i in res.atom_indices if not protein.atoms[i].is_solvent)
    atoms = tuple(sorted(member))

    voxel_centers, voxel_nonpolar = _carve_cavity(protein, atoms, config)
    volume = len(voxel_centers) * config.voxel_size**3
    capacity = int(np.floor(volume / config.volume_per_atom))
    if len(voxel_centers):
        center = voxel_centers.mean(axis=0)
    else:
        center = protein.coords[list(atoms)].mean(axis=0)
    return Subpocket(
        id=subpocket_id,
        protein=protein,
        protein_atoms=atoms,
        center=tuple(float(v) for v in center),
        voxel_centers=voxel_centers,
        voxel_nonpolar=voxel_nonpolar,
        capacity=capacity,
        config=config,
    )


def subpocket_from_residues(
    protein: ProteinStructure,
    residues: Sequence[tuple[str, int]],
    config: PocketConfig = DEFAULT_POCKET_CONFIG,
    subpocket_id: int = 0,
) -> Subpocket:
    """Carve a subpocket around named residues instead of an arm pose.

    ``residues`` are (chain id, residue number) pairs; residue names are not
    needed. Solvent atoms never join the selection. The cavity grid, center,
    and capacity follow the same derivation as :func:`extract_subpocket`.
    """
    wanted = {(str(chain), int(seq)) for chain, seq in residues}
    if not wanted:
        raise EmptySubpocketError("no residues named")
    member: set[int] = set()
    found: set[tuple[str, int]] = set()
    for res in protein.residues:
        chain, seq, _name = res.key
        if (chain, seq) in wanted:
            found.add((chain, seq))
            member.update(i for i in res.atom_indices if not protein.atoms[i].is_solvent)
    missing = wanted - found
    if missing:
        raise EmptySubpocketError(f"residues not in the structure: {sorted(missing)}")
    if not member:
        raise EmptySubpocketError("named residues contain only solvent atoms")
    atoms = tuple(sorted(member))

    voxel_centers, voxel_nonpolar = _carve_cavity(protein, atoms, config)
    volume = len(voxel_centers) * config.voxel_size**3
    capacity = int(np.floor(volume / config.volume_per_atom))
    if len(voxel_centers):
        center = voxel_centers.mean(axis=0)
    else:
        center = protein.coords[list(atoms)].mean(axis=0)
    return Subpocket(
        id=subpocket_id,
        protein=protein,
        protein_atoms=atoms,
        center=tuple(float(v) for v in center),
        voxel_centers=voxel_centers,
        voxel_nonpolar=voxel_nonpolar,
        capacity=capacity,
        config=config,
    )


def _carve_cavity(
    protein: ProteinStructure, atoms: tuple[int, ...], config: PocketConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Cavity voxels near the subpocket atoms, outside all protein vdW spheres.

    Voxel centers sit on the global lattice (k + 1/2) * voxel_size so that the
    same pose always lands on the same voxels regardless of the selection.
    """
    sub_xyz = protein.coords[list(atoms)]
    sub_elem = [protein.atoms[i].element for i in atoms]
    lo = np.floor((sub_xyz.min(axis=0) - config.shell) / config.voxel_size).astype(int)
    hi = np.ceil((sub_xyz.max(axis=0) + config.shell) / config.voxel_size).astype(int)
    axes = [np.arange(lo[d], hi[d]) for d in range(3)]
    if any(len(ax) == 0 for ax in axes):
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = (np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) + 0.5) * config.voxel_size

    d_sub = pairwise_distances(centers, sub_xyz)
    keep = d_sub.min(axis=1) <= config.shell

    # Exclusion must consider every protein atom, not only the subpocket,
    # so neighboring residues still block the grid.
    nonsolvent = [a.index for a in protein.atoms if not a.is_solvent]
    all_xyz = protein.coords[nonsolvent]
    all_rad = np.array([vdw_radius(protein.atoms[i].element) for i in nonsolvent])
    margin = float(all_rad.max()) if len(all_rad) else 0.0
    box_lo, box_hi = centers.min(axis=0) - margin, centers.max(axis=0) + margin
    inside_box = np.all((all_xyz >= box_lo) & (all_xyz <= box_hi), axis=1)
    block_xyz = all_xyz[inside_box]
    block_rad = all_rad[inside_box]
    if len(block_xyz):
        gaps = pairwise_distances(centers, block_xyz) - block_rad[None, :]
        keep &= gaps.min(axis=1) > 0.0

    centers = centers[keep]
    if len(centers) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    nearest = np.argmin(pairwise_distances(centers, sub_xyz), axis=1)
    nonpolar = np.array([sub_elem[k] in _NONPOLAR_ELEMENTS for k in nearest])
    return centers, nonpolar


@dataclass(frozen=True)
class SpatialFactors:
    """The two spatial concepts: cavity fill in [0, 1], fit in [-1, 1]."""

    nonpolar_occupation: float
    surface_complementarity: float

    def as_array(self) -> np.ndarray:
        return np.array([self.nonpolar_occupation, self.surface_complementarity])


def nonpolar_occupation(subpocket: Subpocket, arm: Fragment) -> float:
    """Fraction of non-polar cavity voxels inside some arm atom's vdW sphere."""
    mask = subpocket.voxel_nonpolar
    if not mask.any():
        return 0.0
    voxels = subpocket.voxel_centers[mask]
    coords = arm.coords()
    if len(coords) == 0:
        return 0.0
    radii = np.array([vdw_radius(arm.parent.atoms[i].element) for i in arm.atom_indices])
    dist = pairwise_distances(voxels, coords)
    covered = (dist <= radii[None, :]).any(axis=1)
    return float(covered.mean())


def surface_complementarity(
    subpocket: Subpocket, arm: Fragment, config: PocketConfig | None = None
) -> float:
    """Median surface agreement between the arm and the subpocket wall.

    Each arm atom sphere is sampled with a fixed sphere design rotated into
    the canonical frame of (arm + subpocket) so the score is invariant under
    rigid motions of the whole complex. Sample points buried in sibling arm
    atoms are dropped; points inside a protein sphere score the clash value
    -1; every other point scores the alignment of the outward arm normal with
    the inward protein normal, damped by a Gaussian in the gap distance.
    """
    cfg = config or subpocket.config
    coords = arm.coords()
    if len(coords) == 0:
        return 0.0
    radii = np.array([vdw_radius(arm.parent.atoms[i].element) for i in arm.atom_indices])
    prot_xyz = subpocket.atom_coords
    prot_rad = np.array(
        [vdw_radius(subpocket.protein.atoms[i].element) for i in subpocket.protein_atoms]
    )

    frame = canonical_frame(np.vstack([coords, prot_xyz]))
    dirs = fibonacci_sphere(cfg.sample_points) @ frame.T  # rows rotated into the frame

    scores: list[np.ndarray] = []
    for k in range(len(coords)):
        pts = coords[k] + radii[k] * dirs
        if len(coords) > 1:
            others = np.delete(np.arange(len(coords)), k)
            d_other = pairwise_distances(pts, coords[others])
            exposed = (d_other > radii[others][None, :]).all(axis=1)
        else:
            exposed = np.ones(len(pts), dtype=bool)
        if not exposed.any():
            continue
        pts = pts[exposed]
        normals = dirs[exposed]
        d_prot = pairwise_distances(pts, prot_xyz)
        gaps = d_prot - prot_rad[None, :]
        nearest = np.argmin(gaps, axis=1)
        rows = np.arange(len(pts))
        gap = gaps[rows, nearest]
        to_point = pts - prot_xyz[nearest]
        norm = np.linalg.norm(to_point, axis=1)
        norm[norm == 0.0] = 1.0
        inward = -(to_point / norm[:, None])  # from the point toward the protein atom
        value = (normals * inward).sum(axis=1) * np.exp(-(gap**2) / cfg.sigma**2)
        value = np.where(gap < 0.0, -1.0, value)
        scores.append(value)
    if not scores:
        return 0.0
    return float(np.median(np.concatenate(scores)))


def compute_spatial_factors(subpocket: Subpocket, arm: Fragment) -> SpatialFactors:
    return SpatialFactors(
        nonpolar_occupation=nonpolar_occupation(subpocket, arm),
        surface_complementarity=surface_complementarity(subpocket, arm),
    )
