"""Arm selection: filter the library, score concepts, pick per subpocket.

The library holds small fragment templates with reference conformers. For a
given subpocket each surviving template is posed into the cavity, run through
the concept model, and scored with a weighted sum of the predicted concepts;
selection is then a deterministic argmax or a seeded softmax draw. Every
selection keeps its full concept vector so a report can show why an arm won.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .chem import AtomRecord, BondRecord, MoleculeGraph, graph_key
from .concept import DEFAULT_LOSS_WEIGHTS, ConceptModel, LossWeights
from .fragment import MIN_ARM_HEAVY_ATOMS, Fragment
from .geom import octahedral_rotations
from .interactions import INTERACTION_KINDS
from .pocket import Subpocket, surface_complementarity

__all__ = [
    "FALLBACK_COUNT",
    "SELECTION_MODES",
    "SPATIAL_NAMES",
    "ArmLibrary",
    "LibraryEntry",
    "SamplerError",
    "ScoredCandidate",
    "SelectionReport",
    "SubpocketSelection",
    "compatibility_score",
    "fallback_entries",
    "filter_library",
    "interpretability_report",
    "library_report",
    "load_library",
    "pose_template",
    "sample_arms",
    "save_library",
    "save_report",
    "score_candidates",
    "select",
    "zero_interaction",
]

# Entries taken when capacity filtering leaves nothing: small arms are the
# least likely to clash, so the pipeline stays total on cramped subpockets.
FALLBACK_COUNT = 5

SELECTION_MODES = ("argmax", "softmax")

# Concept names in prediction order: spatial factors first, then rates.
SPATIAL_NAMES = ("nonpolar_occupation", "surface_complementarity")


class SamplerError(ValueError):
    """Bad library, weights, or selection parameters."""


@dataclass(frozen=True)
class LibraryEntry:
    """One reusable arm template with a reference conformer."""

    entry_id: str
    template: Fragment
    source: str = ""

    def __post_init__(self):
        if not self.entry_id:
            raise SamplerError("library entry needs a non-empty id")
        if not self.template.attachment_points:
            raise SamplerError(f"entry {self.entry_id!r} has no attachment point")
        if len(self.template.atom_indices) != len(self.template.parent.atoms):
            raise SamplerError(
                f"entry {self.entry_id!r} template must own its whole molecule"
            )

    @property
    def heavy_atoms(self) -> int:
        return self.template.heavy_atom_count


@dataclass(frozen=True)
class ArmLibrary:
    """Deduplicated arm templates, order-stable."""

    entries: tuple[LibraryEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen_ids: set[str] = set()
        seen_graphs: dict[str, str] = {}
        for entry in self.entries:
            if entry.entry_id in seen_ids:
                raise SamplerError(f"duplicate entry id {entry.entry_id!r}")
            seen_ids.add(entry.entry_id)
            key = graph_key(entry.template.parent)
            if key in seen_graphs:
                raise SamplerError(
                    f"entries {seen_graphs[key]!r} and {entry.entry_id!r} "
                    "share a molecular graph"
                )
            seen_graphs[key] = entry.entry_id

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class ScoredCandidate:
    """A posed template with its predicted concepts and compatibility score."""

    entry_id: str
    posed: Fragment
    spatial: tuple[float, float]
    rates: tuple[float, ...]
    score: float
    heavy_atoms: int


@dataclass(frozen=True, eq=False)
class SubpocketSelection:
    """Scored slate and winners for one subpocket."""

    subpocket_id: int
    candidates: tuple[ScoredCandidate, ...]
    chosen: tuple[ScoredCandidate, ...]
    used_fallback: bool


@dataclass(frozen=True, eq=False)
class SelectionReport:
    """Selections for the fillable subpockets plus the ids of the rest."""

    selections: tuple[SubpocketSelection, ...]
    unfillable: tuple[int, ...]


def filter_library(
    library: ArmLibrary, subpocket: Subpocket
) -> tuple[LibraryEntry, ...]:
    """Entries whose heavy-atom count fits the cavity budget, order kept.

    Minimum size mirrors the decomposition rule: anything smaller would have
    been folded into a scaffold rather than treated as an arm.
    """
    return tuple(
        e
        for e in library.entries
        if MIN_ARM_HEAVY_ATOMS <= e.heavy_atoms <= subpocket.capacity
    )


def fallback_entries(
    library: ArmLibrary, count: int = FALLBACK_COUNT
) -> tuple[LibraryEntry, ...]:
    """The ``count`` smallest entries, ties broken by entry id."""
    ranked = sorted(library.entries, key=lambda e: (e.heavy_atoms, e.entry_id))
    return tuple(ranked[:count])


def _with_coords(arm: Fragment, coords: np.ndarray) -> Fragment:
    atoms = tuple(
        replace(a, position=(float(x), float(y), float(z)))
        for a, (x, y, z) in zip(arm.parent.atoms, coords)
    )
    mol = MoleculeGraph(atoms=atoms, bonds=arm.parent.bonds, name=arm.parent.name)
    return Fragment(
        parent=mol,
        atom_indices=arm.atom_indices,
        attachment_points=arm.attachment_points,
    )


def pose_template(template: Fragment, subpocket: Subpocket) -> Fragment:
    """Place a template conformer into the subpocket cavity.

    The template centroid moves to the cavity centroid (mean voxel center,
    or the subpocket center when no cavity was carved), then the best of the
    24 octahedral orientations by surface complementarity wins; the fixed
    rotation order makes re-posing deterministic.
    """
    base = template.standalone()
    if len(subpocket.voxel_centers):
        target = subpocket.voxel_centers.mean(axis=0)
    else:
        target = np.asarray(subpocket.center, dtype=np.float64)
    centered = base.coords() - base.centroid()
    best: tuple[float, Fragment] | None = None
    for rot in octahedral_rotations():
        posed = _with_coords(base, centered @ rot.T + target)
        score = surface_complementarity(subpocket, posed)
        if best is None or score > best[0]:
            best = (score, posed)
    return best[1]


def compatibility_score(
    spatial: Sequence[float],
    rates: Sequence[float],
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
) -> float:
    """Weighted sum of spatial factors and interaction rates."""
    if len(spatial) != len(weights.spatial) or len(rates) != len(weights.interaction):
        raise SamplerError("concept vector does not match the weight dimensions")
    total = 0.0
    for w, v in zip(weights.spatial, spatial):
        total += w * v
    for w, v in zip(weights.interaction, rates):
        total += w * v
    return total


def score_candidates(
    model: ConceptModel,
    entries: Sequence[LibraryEntry],
    subpocket: Subpocket,
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
) -> tuple[ScoredCandidate, ...]:
    """Pose and score every entry against one subpocket, input order kept."""
    out = []
    for entry in entries:
        posed = pose_template(entry.template, subpocket)
        spatial_arr, rates_arr = model.predict(posed, subpocket).numpy()
        spatial = tuple(float(v) for v in spatial_arr)
        rates = tuple(float(v) for v in rates_arr)
        out.append(
            ScoredCandidate(
                entry_id=entry.entry_id,
                posed=posed,
                spatial=spatial,
                rates=rates,
                score=compatibility_score(spatial, rates, weights),
                heavy_atoms=entry.heavy_atoms,
            )
        )
    return tuple(out)


def _rank_key(cand: ScoredCandidate) -> tuple[float, int, str]:
    return (-cand.score, cand.heavy_atoms, cand.entry_id)


def select(
    candidates: Sequence[ScoredCandidate],
    k: int = 1,
    mode: str = "argmax",
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
) -> tuple[ScoredCandidate, ...]:
    """Pick up to ``k`` winners from a scored slate.

    Argmax sorts by score, breaking ties toward fewer heavy atoms and then
    lexicographic entry id. Softmax draws without replacement with
    probability proportional to exp(score / tau); the slate is pre-sorted so
    the draw order never depends on how candidates were produced.
    """
    if mode not in SELECTION_MODES:
        raise SamplerError(f"unknown selection mode {mode!r}")
    if k < 1:
        raise SamplerError("k must be at least 1")
    ranked = sorted(candidates, key=_rank_key)
    if mode == "argmax":
        return tuple(ranked[:k])
    if tau <= 0.0:
        raise SamplerError("softmax temperature must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    pool = list(ranked)
    chosen: list[ScoredCandidate] = []
    while pool and len(chosen) < k:
        scores = np.array([c.score for c in pool])
        exp = np.exp((scores - scores.max()) / tau)
        idx = int(rng.choice(len(pool), p=exp / exp.sum()))
        chosen.append(pool.pop(idx))
    return tuple(chosen)


def sample_arms(
    model: ConceptModel,
    subpockets: Sequence[Subpocket],
    library: ArmLibrary,
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
    *,
    k: int = 1,
    mode: str = "argmax",
    tau: float = 1.0,
    seed: int = 0,
) -> SelectionReport:
    """Choose arms for every subpocket, reporting the ones nothing fits.

    Capacity filtering falls back to the smallest library entries rather
    than failing, so only an empty library leaves a subpocket unfillable;
    generation continues for the rest either way.
    """
    rng = np.random.default_rng(seed)
    selections: list[SubpocketSelection] = []
    unfillable: list[int] = []
    for subpocket in subpockets:
        entries = filter_library(library, subpocket)
        used_fallback = not entries
        if used_fallback:
            entries = fallback_entries(library)
        if not entries:
            unfillable.append(subpocket.id)
            continue
        candidates = score_candidates(model, entries, subpocket, weights)
        chosen = select(candidates, k=k, mode=mode, tau=tau, rng=rng)
        selections.append(
            SubpocketSelection(
                subpocket_id=subpocket.id,
                candidates=candidates,
                chosen=chosen,
                used_fallback=used_fallback,
            )
        )
    return SelectionReport(selections=tuple(selections), unfillable=tuple(unfillable))


def zero_interaction(weights: LossWeights, kind: str) -> LossWeights:
    """Weights with one interaction channel silenced, for ablation runs."""
    if kind not in INTERACTION_KINDS:
        raise SamplerError(f"unknown interaction kind {kind!r}")
    idx = INTERACTION_KINDS.index(kind)
    interaction = tuple(
        0.0 if i == idx else w for i, w in enumerate(weights.interaction)
    )
    return LossWeights(spatial=weights.spatial, interaction=interaction)


# ---------------------------------------------------------------------------
# Library persistence


def _library_dict(library: ArmLibrary) -> dict:
    entries = []
    for entry in library.entries:
        mol = entry.template.parent
        entries.append(
            {
                "id": entry.entry_id,
                "source": entry.source,
                "atoms": [
                    {
                        "element": a.element,
                        "position": list(a.position),
                        "charge": a.formal_charge,
                        "aromatic": a.is_aromatic,
                    }
                    for a in mol.atoms
                ],
                "bonds": [[b.a, b.b, b.order] for b in mol.bonds],
                "attachments": [[i, rule] for i, rule in entry.template.attachment_points],
            }
        )
    return {"entries": entries}


def save_library(library: ArmLibrary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_library_dict(library), indent=2) + "\n")


def load_library(path: str | Path) -> ArmLibrary:
    """Read a library written by :func:`save_library`.

    Each template molecule is named after its entry id so downstream poses
    stay traceable to the library.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SamplerError(f"malformed library file {path}: {exc}") from exc
    raw_entries = payload.get("entries")
    if not isinstance(raw_entries, list):
        raise SamplerError(f"library file {path} has no entry list")
    entries = []
    for raw in raw_entries:
        try:
            atoms = tuple(
                AtomRecord(
                    index=k,
                    element=int(a["element"]),
                    position=tuple(a["position"]),
                    formal_charge=int(a.get("charge", 0)),
                    is_aromatic=bool(a.get("aromatic", False)),
                )
                for k, a in enumerate(raw["atoms"])
            )
            bonds = tuple(BondRecord(int(a), int(b), int(o)) for a, b, o in raw["bonds"])
            mol = MoleculeGraph(atoms=atoms, bonds=bonds, name=str(raw["id"]))
            template = Fragment.from_molecule(
                mol,
                attachment_points=tuple((int(i), str(r)) for i, r in raw["attachments"]),
            )
            entries.append(
                LibraryEntry(
                    entry_id=str(raw["id"]),
                    template=template,
                    source=str(raw.get("source", "")),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SamplerError(f"bad library entry in {path}: {exc}") from exc
    return ArmLibrary(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Interpretability output


def interpretability_report(
    selection: SubpocketSelection, weights: LossWeights = DEFAULT_LOSS_WEIGHTS
) -> dict:
    """Per-arm concept values and weighted contributions for one subpocket."""
    arms = []
    for cand in selection.chosen:
        concepts: dict[str, float] = {}
        contributions: dict[str, float] = {}
        pairs = list(zip(SPATIAL_NAMES, weights.spatial, cand.spatial)) + list(
            zip(INTERACTION_KINDS, weights.interaction, cand.rates)
        )
        for name, w, v in pairs:
            concepts[name] = float(v)
            contributions[name] = float(w * v)
        arms.append(
            {
                "entry": cand.entry_id,
                "score": float(cand.score),
                "concepts": concepts,
                "contributions": contributions,
            }
        )
    return {
        "subpocket": selection.subpocket_id,
        "used_fallback": selection.used_fallback,
        "arms": arms,
    }


def library_report(
    report: SelectionReport, weights: LossWeights = DEFAULT_LOSS_WEIGHTS
) -> dict:
    return {
        "selections": [interpretability_report(s, weights) for s in report.selections],
        "unfillable": list(report.unfillable),
    }


def save_report(
    report: SelectionReport,
    path: str | Path,
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
) -> None:
    Path(path).write_text(json.dumps(library_report(report, weights), indent=2) + "\n")
