"""Conditional diffusion that grows a scaffold between posed arms.

Scaffold atoms live as offsets from per-atom anchor points (the attachment
centroid of their assigned arm), so the Gaussian track operates in a
translation-free frame. Element and bond categories ride along under a
uniform-mixing kernel. The denoiser is an equivariant message-passing
network over scaffold, arm, and pocket nodes; only scaffold coordinates
move. Assembly turns a finished state plus its arms back into one molecule.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .chem import (
    AtomRecord,
    BondRecord,
    MAX_VALENCE,
    MoleculeGraph,
    SUPPORTED_ELEMENTS,
    connected_components,
    order_valence,
)
from .concept import ELEMENT_INDEX, TrainingConfig, TrainingError
from .fragment import Decomposition, Fragment
from .geom import canonical_frame
from .training import TrainState, load_train_state

__all__ = [
    "AssemblyResult",
    "BOND_CATEGORIES",
    "DEFAULT_DENOISER_CONFIG",
    "Denoiser",
    "DenoiserConfig",
    "DenoisePrediction",
    "DiffusionError",
    "DiffusionLoss",
    "DiffHistoryRow",
    "LINK_CUTOFF",
    "NoiseSchedule",
    "PriorContext",
    "SCHEDULE_MODES",
    "ScaffoldState",
    "SizeHistogram",
    "absolute_coords",
    "assemble",
    "build_prior",
    "forward_sample",
    "load_diffusion_state",
    "load_pairs_jsonl",
    "load_params",
    "load_size_histogram",
    "loss_diff",
    "make_schedule",
    "new_diffusion_state",
    "sample_scaffold",
    "save_loss_curve",
    "save_pairs_jsonl",
    "save_params",
    "save_size_histogram",
    "scaffold_size",
    "size_histogram",
    "train_diffusion",
    "training_pair",
]

BOND_CATEGORIES = ("none", "single", "double", "triple", "aromatic")
N_BOND = len(BOND_CATEGORIES)
N_ELEMENT = len(SUPPORTED_ELEMENTS)

# Linear beta ramp; endpoints shared by every schedule length.
BETA_MIN = 1e-4
BETA_MAX = 2e-2

# Loss mix: squared offsets dominate, categorical tracks weighted half.
COORD_WEIGHT = 1.0
ELEMENT_WEIGHT = 0.5
BOND_WEIGHT = 0.5

# An attachment point bonds to a scaffold atom at most this far away, Angstrom.
LINK_CUTOFF = 2.0

PARAMS_SCHEMA = 1

SCHEDULE_MODES = ("vp", "paper_literal")

# Node roles seen by the denoiser.
_KIND_SCAFFOLD, _KIND_ARM, _KIND_ATTACHMENT, _KIND_PROTEIN = range(4)
_N_KINDS = 4


class DiffusionError(ValueError):
    """Bad schedule, shape, or configuration on the diffusion side."""


@dataclass(frozen=True)
class NoiseSchedule:
    """A beta sequence plus its derived cumulative quantities.

    ``mode`` selects the forward kernel for offsets: ``vp`` shrinks the mean
    by sqrt(alpha_bar) and keeps unit stationary variance, ``paper_literal``
    keeps the mean and lets variance grow as the beta partial sums.
    """

    steps: int
    beta: tuple[float, ...]
    mode: str = "vp"

    def __post_init__(self):
        if self.steps < 1:
            raise DiffusionError("schedule needs at least one step")
        if len(self.beta) != self.steps:
            raise DiffusionError(f"{len(self.beta)} betas for {self.steps} steps")
        for b in self.beta:
            if not 0.0 < b < 1.0:
                raise DiffusionError(f"beta {b} outside (0, 1)")
        if self.mode not in SCHEDULE_MODES:
            raise DiffusionError(f"unknown schedule mode {self.mode!r}")

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        # alpha_bar[t-1] is the survival product after t steps.
        out = np.cumprod(1.0 - np.asarray(self.beta, dtype=np.float64))
        out.setflags(write=False)
        return out

    @cached_property
    def beta_cumsum(self) -> np.ndarray:
        out = np.cumsum(np.asarray(self.beta, dtype=np.float64))
        out.setflags(write=False)
        return out


def make_schedule(steps: int, mode: str = "vp") -> NoiseSchedule:
    """Linear beta ramp from 1e-4 to 2e-2 over ``steps`` timesteps."""
    if steps < 1:
        raise DiffusionError("schedule needs at least one step")
    beta = np.linspace(BETA_MIN, BETA_MAX, steps)
    return NoiseSchedule(steps=steps, beta=tuple(float(b) for b in beta), mode=mode)


def _abar(sched: NoiseSchedule, t: int) -> float:
    # alpha_bar at t=0 is 1 by convention (nothing corrupted yet).
    return 1.0 if t == 0 else float(sched.alpha_bar[t - 1])


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=arr.dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PriorContext:
    """Everything held fixed while the scaffold diffuses.

    Arm rows concatenate the arms in order; ``attachment_indices`` point at
    the arm rows left with an open valence by cleaving. ``anchors`` holds one
    reference point per scaffold atom; offsets are measured against it.
    """

    arm_elements: tuple[int, ...]
    arm_coords: np.ndarray
    attachment_indices: tuple[int, ...]
    protein_elements: tuple[int, ...]
    protein_coords: np.ndarray
    anchors: np.ndarray

    def __post_init__(self):
        arm = np.asarray(self.arm_coords, dtype=np.float64)
        prot = np.asarray(self.protein_coords, dtype=np.float64)
        anch = np.asarray(self.anchors, dtype=np.float64)
        if arm.shape != (len(self.arm_elements), 3):
            raise DiffusionError("arm coordinates do not match arm elements")
        if prot.shape != (len(self.protein_elements), 3):
            raise DiffusionError("protein coordinates do not match protein elements")
        if anch.ndim != 2 or anch.shape[1] != 3:
            raise DiffusionError("anchors must be an (n, 3) array")
        for el in self.arm_elements + self.protein_elements:
            if el not in ELEMENT_INDEX:
                raise DiffusionError(f"unsupported element {el} in prior context")
        seen: set[int] = set()
        for i in self.attachment_indices:
            if not 0 <= i < len(self.arm_elements):
                raise DiffusionError(f"attachment row {i} outside arm rows")
            if i in seen:
                raise DiffusionError(f"duplicate attachment row {i}")
            seen.add(i)
        object.__setattr__(self, "arm_coords", _frozen(arm))
        object.__setattr__(self, "protein_coords", _frozen(prot))
        object.__setattr__(self, "anchors", _frozen(anch))

    @property
    def n_scaffold(self) -> int:
        return len(self.anchors)

    @property
    def n_attachments(self) -> int:
        return len(self.attachment_indices)

    def bond_rows(self) -> int:
        # Bond matrices cover scaffold atoms first, then attachment rows.
        return self.n_scaffold + self.n_attachments


@dataclass(frozen=True, eq=False)
class ScaffoldState:
    """Scaffold degrees of freedom at one timestep.

    ``bonds`` is square over scaffold atoms followed by attachment rows;
    attachment-attachment entries are structurally fixed at ``none``.
    """

    offsets: np.ndarray
    elements: np.ndarray
    bonds: np.ndarray
    t: int = 0

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        elem = np.asarray(self.elements, dtype=np.int64).reshape(-1)
        bond = np.asarray(self.bonds, dtype=np.int64)
        n = len(elem)
        if off.shape != (n, 3):
            raise DiffusionError("offsets do not match element count")
        if bond.ndim != 2 or bond.shape[0] != bond.shape[1]:
            raise DiffusionError("bond matrix must be square")
        if bond.shape[0] < n:
            raise DiffusionError("bond matrix smaller than the scaffold")
        if not np.array_equal(bond, bond.T):
            raise DiffusionError("bond matrix must be symmetric")
        if np.any(np.diag(bond) != 0):
            raise DiffusionError("bond matrix diagonal must stay empty")
        if bond.size and (bond.min() < 0 or bond.max() >= N_BOND):
            raise DiffusionError("bond category out of range")
        if n and (elem.min() < 0 or elem.max() >= N_ELEMENT):
            raise DiffusionError("element category out of range")
        if self.t < 0:
            raise DiffusionError("timestep must be non-negative")
        object.__setattr__(self, "offsets", _frozen(off))
        object.__setattr__(self, "elements", _frozen(elem))
        object.__setattr__(self, "bonds", _frozen(bond))

    @property
    def n_atoms(self) -> int:
        return len(self.elements)


def absolute_coords(state: ScaffoldState, prior: PriorContext) -> np.ndarray:
    """World positions of the scaffold atoms, shape (n, 3)."""
    if state.n_atoms != prior.n_scaffold:
        raise DiffusionError("scaffold state does not match the prior's anchors")
    return prior.anchors + state.offsets


def _merge_arms(arms: Sequence[Fragment]):
    """Flatten arms into node rows; returns elements, coords, attachment
    rows, and one anchor candidate per arm (attachment centroid, else the
    arm centroid)."""
    elements: list[int] = []
    coords: list[tuple[float, float, float]] = []
    attachment_rows: list[int] = []
    candidates: list[np.ndarray] = []
    for arm in arms:
        offset = len(elements)
        row_of = {idx: offset + k for k, idx in enumerate(arm.atom_indices)}
        for idx in arm.atom_indices:
            atom = arm.parent.atoms[idx]
            elements.append(atom.element)
            coords.append(atom.position)
        attach_pos = []
        for idx, _rule in arm.attachment_points:
            attachment_rows.append(row_of[idx])
            attach_pos.append(arm.parent.atoms[idx].position)
        if attach_pos:
            candidates.append(np.mean(np.asarray(attach_pos, dtype=np.float64), axis=0))
        else:
            candidates.append(arm.centroid())
    coord_arr = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    return tuple(elements), coord_arr, tuple(attachment_rows), np.asarray(candidates)


def build_prior(
    arms: Sequence[Fragment],
    protein_elements: Sequence[int],
    protein_coords: np.ndarray,
    n_scaffold: int,
) -> PriorContext:
    """Prior for generation: anchors round-robin over the arm candidates."""
    if not arms:
        raise DiffusionError("prior needs at least one arm")
    if n_scaffold < 0:
        raise DiffusionError("scaffold size must be non-negative")
    elements, coords, attachment_rows, candidates = _merge_arms(arms)
    anchors = candidates[np.arange(n_scaffold) % len(candidates)]
    return PriorContext(
        arm_elements=elements,
        arm_coords=coords,
        attachment_indices=attachment_rows,
        protein_elements=tuple(int(e) for e in protein_elements),
        protein_coords=np.asarray(protein_coords, dtype=np.float64).reshape(-1, 3),
        anchors=anchors.reshape(-1, 3),
    )


def training_pair(
    decomp: Decomposition,
    protein_elements: Sequence[int] = (),
    protein_coords: np.ndarray | None = None,
) -> tuple[ScaffoldState, PriorContext]:
    """Clean state plus prior for one decomposed complex.

    Scaffold atoms take the nearest arm candidate as their anchor; the bond
    matrix records parent bonds among scaffold atoms and across each cleaved
    scaffold-attachment bond.
    """
    if not decomp.arms:
        raise DiffusionError("decomposition has no arms")
    arms = [a.fragment for a in decomp.arms]
    elements, coords, attachment_rows, candidates = _merge_arms(arms)

    ligand = decomp.ligand
    scaffold_idx = decomp.scaffold.atom_indices
    n = len(scaffold_idx)
    if n:
        pos = ligand.coords[list(scaffold_idx)]
        dists = np.linalg.norm(pos[:, None, :] - candidates[None, :, :], axis=2)
        anchors = candidates[np.argmin(dists, axis=1)]
        offsets = pos - anchors
    else:
        anchors = np.zeros((0, 3))
        offsets = np.zeros((0, 3))

    categories = np.array(
        [ELEMENT_INDEX[ligand.atoms[i].element] for i in scaffold_idx], dtype=np.int64
    )

    # Map parent atom index -> bond-matrix row (scaffold first, then
    # attachments in merged-arm order).
    scaffold_row = {idx: k for k, idx in enumerate(scaffold_idx)}
    attach_parent: list[int] = []
    for arm in arms:
        attach_parent.extend(idx for idx, _rule in arm.attachment_points)
    attach_row = {idx: n + k for k, idx in enumerate(attach_parent)}

    m = n + len(attach_parent)
    bonds = np.zeros((m, m), dtype=np.int64)
    for b in ligand.bonds:
        if b.a in scaffold_row and b.b in scaffold_row:
            p, q = scaffold_row[b.a], scaffold_row[b.b]
        elif b.a in scaffold_row and b.b in attach_row:
            p, q = scaffold_row[b.a], attach_row[b.b]
        elif b.b in scaffold_row and b.a in attach_row:
            p, q = scaffold_row[b.b], attach_row[b.a]
        else:
            continue
        bonds[p, q] = bonds[q, p] = b.order

    state = ScaffoldState(offsets=offsets, elements=categories, bonds=bonds, t=0)
    prior = PriorContext(
        arm_elements=elements,
        arm_coords=coords,
        attachment_indices=attachment_rows,
        protein_elements=tuple(int(e) for e in protein_elements),
        protein_coords=(
            np.zeros((0, 3)) if protein_coords is None
            else np.asarray(protein_coords, dtype=np.float64).reshape(-1, 3)
        ),
        anchors=anchors,
    )
    return state, prior


# -- forward corruption ----------------------------------------------------


def _valid_pairs(n_scaffold: int, rows: int) -> list[tuple[int, int]]:
    # Diffused bond entries: every unordered pair touching a scaffold atom.
    return [
        (p, q)
        for p in range(rows)
        for q in range(p + 1, rows)
        if p < n_scaffold or q < n_scaffold
    ]


def _corrupt(
    z0: ScaffoldState, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> ScaffoldState:
    abar = _abar(sched, t)
    n = z0.n_atoms
    if sched.mode == "vp":
        mean = math.sqrt(abar) * z0.offsets
        std = math.sqrt(1.0 - abar)
    else:
        mean = z0.offsets.copy()
        std = math.sqrt(float(sched.beta_cumsum[t - 1]))
    # Draw order is fixed: offsets, element mask+values, bond mask+values.
    offsets = mean + std * rng.standard_normal((n, 3))

    resample = rng.random(n) < (1.0 - abar)
    fresh = rng.integers(0, N_ELEMENT, size=n)
    elements = np.where(resample, fresh, z0.elements)

    bonds = np.array(z0.bonds)
    pairs = _valid_pairs(n, bonds.shape[0])
    if pairs:
        mask = rng.random(len(pairs)) < (1.0 - abar)
        fresh_b = rng.integers(0, N_BOND, size=len(pairs))
        for (p, q), hit, cat in zip(pairs, mask, fresh_b):
            if hit:
                bonds[p, q] = bonds[q, p] = cat
    return ScaffoldState(offsets=offsets, elements=elements, bonds=bonds, t=t)


def forward_sample(
    z0: ScaffoldState, t: int, sched: NoiseSchedule, seed: int
) -> ScaffoldState:
    """Closed-form marginal draw of the corrupted state at timestep ``t``."""
    if not 1 <= t <= sched.steps:
        raise DiffusionError(f"timestep {t} outside [1, {sched.steps}]")
    return _corrupt(z0, t, sched, np.random.default_rng(seed))


# -- denoiser ----------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 64
    layers: int = 4
    time_dim: int = 8

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise DiffusionError("hidden size and layer count must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise DiffusionError("time embedding dimension must be even and >= 2")


DEFAULT_DENOISER_CONFIG = DenoiserConfig()


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal timestep features: sines then cosines over a log-frequency
    ladder, shape (dim,)."""
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass(frozen=True, eq=False)
class DenoisePrediction:
    """Predicted clean scaffold: offsets plus category logits."""

    offsets: torch.Tensor
    element_logits: torch.Tensor
    bond_logits: torch.Tensor


class Denoiser(nn.Module):
    """Equivariant message passing over scaffold, arm, and pocket nodes.

    Features update from pair distances and bond categories; positions update
    through relative-vector sums gated by a learned scalar, and only scaffold
    rows move. Heads read the final state: clean offsets as moved position
    minus anchor, element logits per scaffold atom, and symmetric bond logits
    from summed endpoint features plus the pair distance.
    """

    def __init__(self, config: DenoiserConfig = DEFAULT_DENOISER_CONFIG):
        super().__init__()
        self.config = config
        h = config.hidden
        in_dim = N_ELEMENT + _N_KINDS + config.time_dim
        self.node_in = nn.Linear(in_dim, h)
        self.edge_mlp = nn.ModuleList(
            nn.Linear(2 * h + 1 + N_BOND, h) for _ in range(config.layers)
        )
        self.coord_mlp = nn.ModuleList(
            nn.Linear(h, 1, bias=False) for _ in range(config.layers)
        )
        self.node_mlp = nn.ModuleList(
            nn.Linear(2 * h, h) for _ in range(config.layers)
        )
        self.element_head = nn.Linear(h, N_ELEMENT)
        self.bond_head = nn.Linear(h + 1, N_BOND)
        self.double()

    def _node_arrays(self, state: ScaffoldState, t: int, prior: PriorContext):
        n_s, n_arm = state.n_atoms, len(prior.arm_elements)
        pos = np.concatenate(
            [prior.anchors + state.offsets, prior.arm_coords, prior.protein_coords]
        )
        elem_idx = np.concatenate([
            state.elements,
            [ELEMENT_INDEX[e] for e in prior.arm_elements],
            [ELEMENT_INDEX[e] for e in prior.protein_elements],
        ]).astype(np.int64) if len(pos) else np.zeros(0, dtype=np.int64)
        kinds = np.concatenate([
            np.full(n_s, _KIND_SCAFFOLD),
            np.full(n_arm, _KIND_ARM),
            np.full(len(prior.protein_elements), _KIND_PROTEIN),
        ]).astype(np.int64)
        for row in prior.attachment_indices:
            kinds[n_s + row] = _KIND_ATTACHMENT

        total = len(pos)
        feats = np.zeros((total, N_ELEMENT + _N_KINDS + self.config.time_dim))
        feats[np.arange(total), elem_idx] = 1.0
        feats[np.arange(total), N_ELEMENT + kinds] = 1.0
        feats[:, N_ELEMENT + _N_KINDS:] = time_embedding(t, self.config.time_dim)
        return pos, feats

    def _bond_node_index(self, state: ScaffoldState, prior: PriorContext) -> list[int]:
        # Bond-matrix row -> node row: scaffold atoms, then attachment atoms.
        n_s = state.n_atoms
        return list(range(n_s)) + [n_s + row for row in prior.attachment_indices]

    def denoise(
        self, state: ScaffoldState, t: int, prior: PriorContext
    ) -> DenoisePrediction:
        n_s = state.n_atoms
        if n_s != prior.n_scaffold:
            raise DiffusionError("state and prior disagree on scaffold size")
        if state.bonds.shape[0] != prior.bond_rows():
            raise DiffusionError("bond matrix does not cover scaffold plus attachments")

        pos_np, feats_np = self._node_arrays(state, t, prior)
        total = len(pos_np)
        x = torch.from_numpy(np.ascontiguousarray(pos_np))
        h = self.node_in(torch.from_numpy(feats_np))

        # Pairwise bond one-hots in node space; out-of-scope pairs stay zero.
        bond_idx = self._bond_node_index(state, prior)
        pair_onehot = torch.zeros((total, total, N_BOND), dtype=torch.float64)
        for bp, np_ in enumerate(bond_idx):
            for bq, nq_ in enumerate(bond_idx):
                if bp != bq:
                    pair_onehot[np_, nq_, int(state.bonds[bp, bq])] = 1.0

        offdiag = 1.0 - torch.eye(total, dtype=torch.float64)
        scaffold_mask = torch.zeros(total, dtype=torch.float64)
        scaffold_mask[:n_s] = 1.0
        denom = max(total - 1, 1)

        for layer in range(self.config.layers):
            diff = x[:, None, :] - x[None, :, :]
            dist = diff.norm(dim=2)
            e_in = torch.cat(
                [
                    h[:, None, :].expand(total, total, -1),
                    h[None, :, :].expand(total, total, -1),
                    dist[:, :, None],
                    pair_onehot,
                ],
                dim=2,
            )
            msg = F.silu(self.edge_mlp[layer](e_in)) * offdiag[:, :, None]
            gate = self.coord_mlp[layer](msg)[:, :, 0] * offdiag
            step = (diff / (dist[:, :, None] + 1.0) * gate[:, :, None]).sum(dim=1)
            x = x + scaffold_mask[:, None] * step / denom
            pooled = msg.sum(dim=1) / denom
            h = h + F.silu(self.node_mlp[layer](torch.cat([h, pooled], dim=1)))

        anchors = torch.from_numpy(prior.anchors.copy())
        offsets = x[:n_s] - anchors
        element_logits = self.element_head(h[:n_s])

        rows = torch.tensor(bond_idx, dtype=torch.long)
        hb = h[rows]
        xb = x[rows]
        db = (xb[:, None, :] - xb[None, :, :]).norm(dim=2)
        pair_feats = torch.cat(
            [hb[:, None, :] + hb[None, :, :], db[:, :, None]], dim=2
        )
        bond_logits = self.bond_head(pair_feats)
        return DenoisePrediction(
            offsets=offsets, element_logits=element_logits, bond_logits=bond_logits
        )


# -- loss and training -------------------------------------------------------


@dataclass(frozen=True)
class DiffusionLoss:
    """Per-term breakdown; ``total`` carries the fixed 1.0/0.5/0.5 mix."""

    coord: torch.Tensor
    element: torch.Tensor
    bond: torch.Tensor
    total: torch.Tensor

    def detached(self) -> tuple[float, float, float, float]:
        return (
            float(self.coord.detach()),
            float(self.element.detach()),
            float(self.bond.detach()),
            float(self.total.detach()),
        )


def _loss_with_rng(
    model: Denoiser,
    z0: ScaffoldState,
    prior: PriorContext,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> DiffusionLoss:
    t = int(rng.integers(1, sched.steps + 1))
    z_t = _corrupt(z0, t, sched, rng)
    pred = model.denoise(z_t, t, prior)

    zero = torch.zeros((), dtype=torch.float64)
    n = z0.n_atoms
    if n:
        target = torch.from_numpy(z0.offsets.copy())
        coord = ((pred.offsets - target) ** 2).sum(dim=1).mean()
        element = F.cross_entropy(
            pred.element_logits, torch.from_numpy(z0.elements.copy())
        )
    else:
        coord, element = zero, zero

    pairs = _valid_pairs(n, z0.bonds.shape[0])
    if pairs:
        rows = torch.tensor([p for p, _ in pairs], dtype=torch.long)
        cols = torch.tensor([q for _, q in pairs], dtype=torch.long)
        logits = pred.bond_logits[rows, cols]
        target_b = torch.from_numpy(z0.bonds[tuple(zip(*pairs))])
        bond = F.cross_entropy(logits, target_b)
    else:
        bond = zero

    total = COORD_WEIGHT * coord + ELEMENT_WEIGHT * element + BOND_WEIGHT * bond
    if not torch.isfinite(total):
        raise TrainingError("non-finite diffusion loss")
    return DiffusionLoss(coord=coord, element=element, bond=bond, total=total)


def loss_diff(
    model: Denoiser,
    z0: ScaffoldState,
    prior: PriorContext,
    sched: NoiseSchedule,
    seed: int,
) -> DiffusionLoss:
    """Single-sample objective at a uniformly drawn timestep."""
    return _loss_with_rng(model, z0, prior, sched, np.random.default_rng(seed))


@dataclass(frozen=True)
class DiffHistoryRow:
    step: int
    coord: float
    element: float
    bond: float
    total: float


def new_diffusion_state(
    config: TrainingConfig = TrainingConfig(),
    model_config: DenoiserConfig = DEFAULT_DENOISER_CONFIG,
) -> TrainState:
    """Fresh model, optimizer, and noise stream, before any step has run."""
    torch.manual_seed(config.seed)
    model = Denoiser(model_config)
    return TrainState(
        model=model,
        optimizer=torch.optim.Adam(model.parameters(), lr=config.learning_rate),
        rng=np.random.default_rng(config.seed),
        step=0,
    )


def load_diffusion_state(path) -> TrainState:
    """Reload a checkpoint written by :func:`fraglink.training.save_train_state`."""
    return load_train_state(path, lambda cfg: Denoiser(DenoiserConfig(**cfg)))


def train_diffusion(
    samples: Sequence[tuple[ScaffoldState, PriorContext]],
    sched: NoiseSchedule,
    config: TrainingConfig = TrainingConfig(),
    model_config: DenoiserConfig = DEFAULT_DENOISER_CONFIG,
    state: TrainState | None = None,
) -> tuple[Denoiser, list[DiffHistoryRow]]:
    """Adam on the mixed objective over randomly drawn minibatches.

    ``state`` resumes a checkpointed run: training continues from its step
    counter up to ``config.steps`` total and advances the state in place.
    """
    if not samples:
        raise DiffusionError("no training samples")
    if state is None:
        state = new_diffusion_state(config, model_config)
    model, optim, rng = state.model, state.optimizer, state.rng
    history: list[DiffHistoryRow] = []
    size = min(config.batch_size, len(samples))

    for step in range(state.step, config.steps):
        batch = rng.integers(0, len(samples), size=size)
        try:
            losses = [
                _loss_with_rng(model, *samples[i], sched=sched, rng=rng) for i in batch
            ]
        except TrainingError as exc:
            raise TrainingError(f"{exc} at step {step}") from exc
        total = torch.stack([l.total for l in losses]).mean()
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        optim.zero_grad()
        total.backward()
        optim.step()
        state.step = step + 1
        parts = np.array([l.detached() for l in losses]).mean(axis=0)
        history.append(DiffHistoryRow(step, *(float(v) for v in parts)))
    return model, history


def save_loss_curve(history: Sequence[DiffHistoryRow], path) -> None:
    lines = ["step,coord,element,bond,total"]
    lines += [
        f"{r.step},{r.coord!r},{r.element!r},{r.bond!r},{r.total!r}" for r in history
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_params(model: Denoiser, path, extra: Mapping | None = None) -> None:
    """Weights plus config in one npz; loads back bit-exact.

    ``extra`` entries join the JSON header (provenance such as a config hash)
    and are ignored on load.
    """
    meta = {
        "schema": PARAMS_SCHEMA,
        "config": asdict(model.config),
        **(dict(extra) if extra else {}),
    }
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_params(path) -> Denoiser:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema") != PARAMS_SCHEMA:
            raise DiffusionError(f"unsupported params schema {meta.get('schema')}")
        model = Denoiser(DenoiserConfig(**meta["config"]))
        state = {
            k: torch.from_numpy(np.array(data[k]))
            for k in data.files
            if k != "__meta__"
        }
    model.load_state_dict(state)
    return model


# -- dataset persistence -------------------------------------------------------

PAIRS_SCHEMA = 1


def pair_to_obj(z0: ScaffoldState, prior: PriorContext) -> dict:
    """JSON-ready form of one training pair; floats round-trip exactly."""
    return {
        "schema": PAIRS_SCHEMA,
        "state": {
            "offsets": z0.offsets.tolist(),
            "elements": z0.elements.tolist(),
            "bonds": z0.bonds.tolist(),
            "t": z0.t,
        },
        "prior": {
            "arm_elements": list(prior.arm_elements),
            "arm_coords": prior.arm_coords.tolist(),
            "attachment_indices": list(prior.attachment_indices),
            "protein_elements": list(prior.protein_elements),
            "protein_coords": prior.protein_coords.tolist(),
            "anchors": prior.anchors.tolist(),
        },
    }


def pair_from_obj(obj: Mapping) -> tuple[ScaffoldState, PriorContext]:
    if obj.get("schema") != PAIRS_SCHEMA:
        raise DiffusionError(f"unsupported training-pair schema {obj.get('schema')!r}")
    try:
        s, p = obj["state"], obj["prior"]
        state = ScaffoldState(
            offsets=np.array(s["offsets"], dtype=np.float64).reshape(-1, 3),
            elements=np.array(s["elements"], dtype=np.int64),
            bonds=np.array(s["bonds"], dtype=np.int64).reshape(
                len(s["bonds"]), len(s["bonds"])
            ),
            t=int(s["t"]),
        )
        prior = PriorContext(
            arm_elements=tuple(int(v) for v in p["arm_elements"]),
            arm_coords=np.array(p["arm_coords"], dtype=np.float64).reshape(-1, 3),
            attachment_indices=tuple(int(v) for v in p["attachment_indices"]),
            protein_elements=tuple(int(v) for v in p["protein_elements"]),
            protein_coords=np.array(p["protein_coords"], dtype=np.float64).reshape(-1, 3),
            anchors=np.array(p["anchors"], dtype=np.float64).reshape(-1, 3),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DiffusionError(f"malformed training pair: {exc}") from exc
    return state, prior


def save_pairs_jsonl(
    pairs: Sequence[tuple[ScaffoldState, PriorContext]], path
) -> None:
    """One compact JSON object per line, in input order."""
    with open(path, "w", encoding="utf-8") as fh:
        for z0, prior in pairs:
            fh.write(json.dumps(pair_to_obj(z0, prior), separators=(",", ":")) + "\n")


def load_pairs_jsonl(path) -> list[tuple[ScaffoldState, PriorContext]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(pair_from_obj(json.loads(line)))
    return pairs


def save_size_histogram(hist: SizeHistogram, path) -> None:
    buckets = {
        str(arms): {str(size): w for size, w in sorted(counts.items())}
        for arms, counts in sorted(hist.buckets.items())
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"schema": PAIRS_SCHEMA, "buckets": buckets}, fh, indent=2)
        fh.write("\n")


def load_size_histogram(path) -> SizeHistogram:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != PAIRS_SCHEMA:
        raise DiffusionError(f"unsupported histogram schema {payload.get('schema')!r}")
    try:
        buckets = {
            int(arms): {int(size): float(w) for size, w in counts.items()}
            for arms, counts in payload["buckets"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise DiffusionError(f"malformed size histogram: {exc}") from exc
    return SizeHistogram(buckets=buckets)


# -- ancestral sampling ------------------------------------------------------


def _context_frame(prior: PriorContext) -> np.ndarray:
    pts = np.concatenate([prior.arm_coords, prior.protein_coords])
    return canonical_frame(pts) if len(pts) >= 2 else np.eye(3)


def _draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # probs: (n, K) rows summing to one; inverse-CDF against one uniform each.
    # Clamp guards the top index when rounding leaves the row sum below u.
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def _category_posterior(
    current: np.ndarray, p0: np.ndarray, alpha_t: float, abar_prev: float
) -> np.ndarray:
    """Uniform-mixing reverse step marginalised over predicted clean labels."""
    k = p0.shape[1]
    onehot = np.zeros_like(p0)
    onehot[np.arange(len(current)), current] = 1.0
    likelihood = alpha_t * onehot + (1.0 - alpha_t) / k
    prior_t = abar_prev * p0 + (1.0 - abar_prev) / k
    probs = likelihood * prior_t
    return probs / probs.sum(axis=1, keepdims=True)


def sample_scaffold(
    model,
    prior: PriorContext,
    n_atoms: int,
    sched: NoiseSchedule,
    seed: int,
) -> ScaffoldState:
    """Ancestral reverse pass from pure noise to a t=0 scaffold.

    Gaussian draws are made in a canonical frame of the fixed context, so a
    rotated prior reproduces the same sample rotated. Categories step through
    the uniform-mixing posterior against the predicted logits.
    """
    if n_atoms < 0:
        raise DiffusionError("scaffold size must be non-negative")
    if n_atoms != prior.n_scaffold:
        raise DiffusionError("prior anchors do not match the requested size")
    rng = np.random.default_rng(seed)
    frame = _context_frame(prior)

    def gauss(shape):
        return rng.standard_normal(shape) @ frame.T

    rows = prior.bond_rows()
    pairs = _valid_pairs(n_atoms, rows)
    offsets = gauss((n_atoms, 3))
    elements = rng.integers(0, N_ELEMENT, size=n_atoms)
    bonds = np.zeros((rows, rows), dtype=np.int64)
    if pairs:
        cats = rng.integers(0, N_BOND, size=len(pairs))
        for (p, q), c in zip(pairs, cats):
            bonds[p, q] = bonds[q, p] = c
    state = ScaffoldState(offsets=offsets, elements=elements, bonds=bonds, t=sched.steps)

    for t in range(sched.steps, 0, -1):
        with torch.no_grad():
            pred = model.denoise(state, t, prior)
        z0_hat = pred.offsets.numpy()
        p0_elem = F.softmax(pred.element_logits, dim=1).numpy()
        p0_bond = F.softmax(pred.bond_logits, dim=2).numpy()

        beta_t = sched.beta[t - 1]
        alpha_t = 1.0 - beta_t
        abar_t = _abar(sched, t)
        abar_prev = _abar(sched, t - 1)

        mean = (
            math.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * z0_hat
            + math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t) * state.offsets
        )
        if t > 1:
            var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
            offsets = mean + math.sqrt(var) * gauss((n_atoms, 3))
        else:
            offsets = mean

        if n_atoms:
            probs = _category_posterior(state.elements, p0_elem, alpha_t, abar_prev)
            elements = _draw_categorical(probs, rng)
        else:
            elements = state.elements
        bonds = np.array(state.bonds)
        if pairs:
            current = np.array([state.bonds[p, q] for p, q in pairs])
            p0 = np.stack([p0_bond[p, q] for p, q in pairs])
            probs = _category_posterior(current, p0, alpha_t, abar_prev)
            drawn = _draw_categorical(probs, rng)
            for (p, q), c in zip(pairs, drawn):
                bonds[p, q] = bonds[q, p] = c
        state = ScaffoldState(offsets=offsets, elements=elements, bonds=bonds, t=t - 1)
    return state


# -- assembly ----------------------------------------------------------------


@dataclass(frozen=True)
class AssemblyResult:
    """One stitched molecule plus what went wrong while stitching."""

    molecule: MoleculeGraph
    disconnected: bool
    rejected_scaffold: tuple[int, ...]
    unlinked: tuple[int, ...]


def assemble(
    arms: Sequence[Fragment], scaffold: ScaffoldState, prior: PriorContext
) -> AssemblyResult:
    """Stitch arms and a finished scaffold into one molecule.

    Scaffold-scaffold bonds come straight from the sampled matrix, capped by
    standard valences (over-cap scaffold atoms are dropped, lowest index
    first). Each attachment point then bonds singly to its nearest surviving
    scaffold atom within 2.0 A, falling back to the nearest free attachment
    point of another arm; anything still unlinked is reported.
    """
    elements, coords, attachment_rows, _ = _merge_arms(arms)
    if (
        elements != prior.arm_elements
        or attachment_rows != prior.attachment_indices
        or not np.array_equal(coords, prior.arm_coords)
    ):
        raise DiffusionError("arms do not match the prior they were posed with")
    n_arm = len(elements)
    n_s = scaffold.n_atoms
    scaffold_pos = absolute_coords(scaffold, prior)

    # Global index space: arm atoms first, scaffold atoms after.
    arm_bonds: list[tuple[int, int, int]] = []
    offset = 0
    arm_of_attachment: list[int] = []
    for arm_idx, arm in enumerate(arms):
        row_of = {idx: offset + k for k, idx in enumerate(arm.atom_indices)}
        for b in arm.bonds_within():
            arm_bonds.append((row_of[b.a], row_of[b.b], b.order))
        offset += len(arm.atom_indices)
        arm_of_attachment.extend(arm_idx for _ in arm.attachment_points)

    scaffold_bonds = [
        (n_arm + p, n_arm + q, int(scaffold.bonds[p, q]))
        for p in range(n_s)
        for q in range(p + 1, n_s)
        if scaffold.bonds[p, q] != 0
    ]

    # Valence pass: drop the lowest over-cap scaffold atom until none remain.
    alive = set(range(n_s))
    while True:
        load = {i: 0.0 for i in alive}
        for a, b, order in scaffold_bonds:
            p, q = a - n_arm, b - n_arm
            if p in alive and q in alive:
                load[p] += order_valence(order)
                load[q] += order_valence(order)
        over = sorted(
            i for i in alive
            if load[i] > MAX_VALENCE[SUPPORTED_ELEMENTS[scaffold.elements[i]]]
        )
        if not over:
            break
        alive.discard(over[0])
    rejected = tuple(sorted(set(range(n_s)) - alive))
    scaffold_bonds = [
        (a, b, o)
        for a, b, o in scaffold_bonds
        if (a - n_arm) in alive and (b - n_arm) in alive
    ]

    # Current valence load per global atom, links included as they land.
    load_of = [0.0] * (n_arm + n_s)
    for a, b, order in arm_bonds + scaffold_bonds:
        load_of[a] += order_valence(order)
        load_of[b] += order_valence(order)

    def cap(g: int) -> float:
        el = elements[g] if g < n_arm else SUPPORTED_ELEMENTS[scaffold.elements[g - n_arm]]
        return MAX_VALENCE[el]

    links: list[tuple[int, int]] = []
    linked: set[int] = set()
    unlinked: list[int] = []
    for k, row in enumerate(attachment_rows):
        if k in linked:
            continue
        g = row
        p = coords[row]
        best: tuple[float, int, int | None] | None = None  # (dist, global, partner)
        for s in sorted(alive):
            gs = n_arm + s
            d = float(np.linalg.norm(scaffold_pos[s] - p))
            if d <= LINK_CUTOFF and load_of[g] + 1 <= cap(g) and load_of[gs] + 1 <= cap(gs):
                if best is None or (d, gs) < best[:2]:
                    best = (d, gs, None)
        if best is None:
            for j, other_row in enumerate(attachment_rows):
                if j == k or j in linked:
                    continue
                if arm_of_attachment[j] == arm_of_attachment[k]:
                    continue
                go = other_row
                d = float(np.linalg.norm(coords[other_row] - p))
                if d <= LINK_CUTOFF and load_of[g] + 1 <= cap(g) and load_of[go] + 1 <= cap(go):
                    if best is None or (d, go) < best[:2]:
                        best = (d, go, j)
        if best is None:
            unlinked.append(k)
            continue
        _, target, partner = best
        links.append((g, target))
        load_of[g] += 1.0
        load_of[target] += 1.0
        linked.add(k)
        if partner is not None:
            linked.add(partner)

    # Reindex: arm atoms keep order, surviving scaffold atoms follow.
    final_of = {g: g for g in range(n_arm)}
    for new, s in enumerate(sorted(alive)):
        final_of[n_arm + s] = n_arm + new

    aromatic_scaffold = {
        p
        for p in alive
        for q in range(n_s)
        if q in alive and scaffold.bonds[p, q] == 4
    }
    atoms = []
    for arm in arms:
        for idx in arm.atom_indices:
            a = arm.parent.atoms[idx]
            atoms.append(
                AtomRecord(
                    index=len(atoms),
                    element=a.element,
                    position=a.position,
                    formal_charge=a.formal_charge,
                    is_aromatic=a.is_aromatic,
                )
            )
    for s in sorted(alive):
        atoms.append(
            AtomRecord(
                index=len(atoms),
                element=SUPPORTED_ELEMENTS[scaffold.elements[s]],
                position=tuple(float(v) for v in scaffold_pos[s]),
                is_aromatic=s in aromatic_scaffold,
            )
        )

    bonds = [
        BondRecord(final_of[a], final_of[b], order)
        for a, b, order in arm_bonds + scaffold_bonds
    ]
    bonds += [BondRecord(final_of[a], final_of[b], 1) for a, b in links]
    molecule = MoleculeGraph(atoms=tuple(atoms), bonds=tuple(bonds))
    parts = connected_components(len(atoms), molecule.bonds)
    return AssemblyResult(
        molecule=molecule,
        disconnected=len(parts) > 1,
        rejected_scaffold=rejected,
        unlinked=tuple(unlinked),
    )


# -- scaffold size -----------------------------------------------------------


@dataclass(frozen=True)
class SizeHistogram:
    """Empirical scaffold sizes keyed by arm count."""

    buckets: Mapping[int, Mapping[int, float]]

    def pooled(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for counts in self.buckets.values():
            for size, weight in counts.items():
                out[size] = out.get(size, 0.0) + weight
        return out


def size_histogram(decomps: Sequence[Decomposition]) -> SizeHistogram:
    buckets: dict[int, dict[int, float]] = {}
    for d in decomps:
        bucket = buckets.setdefault(len(d.arms), {})
        size = len(d.scaffold.atom_indices)
        bucket[size] = bucket.get(size, 0.0) + 1.0
    return SizeHistogram(buckets=buckets)


def scaffold_size(hist: SizeHistogram, arm_count: int, seed: int) -> int:
    """Draw a scaffold atom count for ``arm_count`` arms; unseen arm counts
    fall back to the pooled histogram."""
    counts = dict(hist.buckets.get(arm_count, {})) or hist.pooled()
    if not counts:
        raise DiffusionError("empty size histogram")
    sizes = sorted(counts)
    weights = np.array([counts[s] for s in sizes], dtype=np.float64)
    probs = weights / weights.sum()
    rng = np.random.default_rng(seed)
    return int(sizes[_draw_categorical(probs[None, :], rng)[0]])
