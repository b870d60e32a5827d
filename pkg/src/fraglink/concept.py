"""Concept-bottleneck scoring model.

Two distance-only encoders (arm atoms, subpocket protein atoms) feed small
heads that predict the interpretable concepts: two spatial factors squashed
into (0, 1) and seven positive interaction rates. Every learnable op runs in
float64 so finite-difference gradient checks hold tightly.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .chem import SUPPORTED_ELEMENTS
from .dataset import PairSample
from .fragment import Fragment
from .interactions import INTERACTION_KINDS
from .pocket import DEFAULT_POCKET_CONFIG, PocketConfig, Subpocket
from .training import TrainState, load_train_state

__all__ = [
    "RESIDUE_CLASSES",
    "ConceptConfig",
    "DEFAULT_CONCEPT_CONFIG",
    "ConceptError",
    "TrainingError",
    "ConceptModel",
    "ConceptPrediction",
    "ConceptSample",
    "LossWeights",
    "DEFAULT_LOSS_WEIGHTS",
    "ConceptLoss",
    "TrainingConfig",
    "HistoryRow",
    "gaussian_rbf",
    "shifted_softplus",
    "spatial_loss",
    "interaction_loss",
    "concept_loss",
    "dataset_loss",
    "new_concept_state",
    "load_concept_state",
    "train_concept",
    "save_loss_curve",
    "save_params",
    "load_params",
]

ELEMENT_INDEX = {z: k for k, z in enumerate(SUPPORTED_ELEMENTS)}

# The twenty standard residues get their own class; everything else (ions,
# modified residues, non-standard HET groups) lands in the trailing bucket.
RESIDUE_CLASSES = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
    "other",
)
_RESIDUE_INDEX = {name: k for k, name in enumerate(RESIDUE_CLASSES[:-1])}

N_SPATIAL = 2
N_RATES = len(INTERACTION_KINDS)


class ConceptError(ValueError):
    """Invalid input to the concept model."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass(frozen=True)
class ConceptConfig:
    """Architecture sizes; defaults are tuned for minute-scale training."""

    hidden: int = 64
    arm_blocks: int = 3
    pocket_layers: int = 2
    rbf_bins: int = 16
    cutoff: float = 5.0
    rbf_width: float = 0.5

    def __post_init__(self):
        if self.hidden < 1 or self.arm_blocks < 1 or self.pocket_layers < 1:
            raise ValueError("hidden, arm_blocks, pocket_layers must be >= 1")
        if self.rbf_bins < 2:
            raise ValueError("need at least 2 radial basis functions")
        if self.cutoff <= 0 or self.rbf_width <= 0:
            raise ValueError("cutoff and rbf_width must be positive")


DEFAULT_CONCEPT_CONFIG = ConceptConfig()


def residue_class_index(res_name: str) -> int:
    return _RESIDUE_INDEX.get(res_name.upper(), len(RESIDUE_CLASSES) - 1)


def shifted_softplus(x: Tensor) -> Tensor:
    """softplus(x) - ln 2; zero at zero, so zeroed layers stay silent."""
    return F.softplus(x) - math.log(2.0)


def gaussian_rbf(dist: np.ndarray, config: ConceptConfig) -> np.ndarray:
    """Expand distances over Gaussians centered evenly on [0, cutoff]."""
    centers = np.linspace(0.0, config.cutoff, config.rbf_bins)
    delta = np.asarray(dist, dtype=np.float64)[..., None] - centers
    return np.exp(-(delta**2) / (2.0 * config.rbf_width**2))


def _canonical_order(keys: list[tuple]) -> list[int]:
    """Atom order fixed by content, so pooling sums in a permutation-free order."""
    return sorted(range(len(keys)), key=keys.__getitem__)


def _pair_tensors(coords: np.ndarray, config: ConceptConfig) -> tuple[Tensor, Tensor]:
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    mask = (dist < config.cutoff) & ~np.eye(len(coords), dtype=bool)
    rbf = torch.from_numpy(gaussian_rbf(dist, config))
    return rbf, torch.from_numpy(mask.astype(np.float64))


class ConceptModel(nn.Module):
    """Arm and pocket encoders plus the two concept heads."""

    def __init__(self, config: ConceptConfig = DEFAULT_CONCEPT_CONFIG):
        super().__init__()
        self.config = config
        h = config.hidden
        n_feat = len(SUPPORTED_ELEMENTS) + len(RESIDUE_CLASSES)
        self.element_table = nn.Embedding(len(SUPPORTED_ELEMENTS), h)
        self.arm_mix = nn.ModuleList(
            nn.Linear(h, h, bias=False) for _ in range(config.arm_blocks)
        )
        self.arm_filter = nn.ModuleList(
            nn.Linear(config.rbf_bins, h) for _ in range(config.arm_blocks)
        )
        self.pocket_embed = nn.Linear(n_feat, h, bias=False)
        self.pocket_mix = nn.ModuleList(
            nn.Linear(h, h, bias=False) for _ in range(config.pocket_layers)
        )
        self.pocket_type = nn.ModuleList(
            nn.Linear(n_feat, h, bias=False) for _ in range(config.pocket_layers)
        )
        self.pocket_filter = nn.ModuleList(
            nn.Linear(config.rbf_bins, h) for _ in range(config.pocket_layers)
        )
        self.spatial_head = nn.ModuleList([nn.Linear(2 * h, h), nn.Linear(h, N_SPATIAL)])
        self.rate_head = nn.ModuleList([nn.Linear(2 * h, h), nn.Linear(h, N_RATES)])
        self.double()

    # -- encoders -------------------------------------------------------

    def encode_arm(self, arm: Fragment) -> Tensor:
        """Continuous-filter message passing over arm atoms, sum-pooled."""
        atoms = [arm.parent.atoms[i] for i in arm.atom_indices]
        if not atoms:
            raise ConceptError("cannot encode an arm with no atoms")
        order = _canonical_order([(a.element, a.position) for a in atoms])
        elements = torch.tensor([ELEMENT_INDEX[atoms[i].element] for i in order])
        coords = np.array([atoms[i].position for i in order], dtype=np.float64)
        rbf, mask = _pair_tensors(coords, self.config)

        x = self.element_table(elements)
        for mix, filt in zip(self.arm_mix, self.arm_filter):
            gate = filt(rbf) * mask[:, :, None]  # (i, j, h)
            x = x + (mix(x)[None, :, :] * gate).sum(dim=1)
        return x.sum(dim=0)

    def encode_pocket(self, subpocket: Subpocket) -> Tensor:
        """Typed convolution over subpocket protein atoms, sum-pooled.

        Each layer pairs the continuous distance filter with a discrete
        per-type weight looked up from the atom's one-hot feature, so both
        chemistry and geometry shape the message.
        """
        atoms = [subpocket.protein.atoms[i] for i in subpocket.protein_atoms]
        if not atoms:
            raise ConceptError("cannot encode an empty subpocket")
        n_elem = len(SUPPORTED_ELEMENTS)
        keys = [
            (ELEMENT_INDEX[a.element], residue_class_index(a.res_name), a.position)
            for a in atoms
        ]
        order = _canonical_order(keys)
        feats = np.zeros((len(atoms), n_elem + len(RESIDUE_CLASSES)))
        for row, i in enumerate(order):
            feats[row, keys[i][0]] = 1.0
            feats[row, n_elem + keys[i][1]] = 1.0
        coords = np.array([atoms[i].position for i in order], dtype=np.float64)
        rbf, mask = _pair_tensors(coords, self.config)

        f = torch.from_numpy(feats)
        x = self.pocket_embed(f)
        for mix, typed, filt in zip(self.pocket_mix, self.pocket_type, self.pocket_filter):
            gate = filt(rbf) * mask[:, :, None]
            x = x + ((mix(x) + typed(f))[None, :, :] * gate).sum(dim=1)
        return x.sum(dim=0)

    # -- heads ----------------------------------------------------------

    def predict(self, arm: Fragment, subpocket: Subpocket) -> "ConceptPrediction":
        z = torch.cat([self.encode_arm(arm), self.encode_pocket(subpocket)])
        hidden_s = shifted_softplus(self.spatial_head[0](z))
        hidden_r = shifted_softplus(self.rate_head[0](z))
        return ConceptPrediction(
            spatial=torch.sigmoid(self.spatial_head[1](hidden_s)),
            rates=F.softplus(self.rate_head[1](hidden_r)),
        )


@dataclass
class ConceptPrediction:
    """Model outputs: spatial factors in (0, 1) and positive Poisson rates."""

    spatial: Tensor  # (2,)
    rates: Tensor  # (7,)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.spatial.detach().numpy(), self.rates.detach().numpy()


@dataclass(frozen=True)
class ConceptSample:
    """One training example with its subpocket already extracted.

    ``spatial`` targets live in [0, 1] to match the sigmoid head, so the
    surface complementarity label (natively in [-1, 1]) is stored rescaled
    as (value + 1) / 2.
    """

    arm: Fragment
    subpocket: Subpocket
    spatial: tuple[float, float]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.counts) != N_RATES:
            raise ValueError("counts must have one entry per interaction kind")
        for v in self.spatial:
            if math.isfinite(v) and not 0.0 <= v <= 1.0:
                raise ValueError("spatial targets must lie in [0, 1]")

    @classmethod
    def from_pair(
        cls, sample: PairSample, config: PocketConfig = DEFAULT_POCKET_CONFIG
    ) -> "ConceptSample":
        return cls(
            arm=sample.arm,
            subpocket=sample.subpocket(config),
            spatial=(
                sample.spatial_true.nonpolar_occupation,
                (sample.spatial_true.surface_complementarity + 1.0) / 2.0,
            ),
            counts=sample.interaction_counts,
        )


@dataclass(frozen=True)
class LossWeights:
    """Per-concept loss weights; non-negative and not all zero."""

    spatial: tuple[float, float] = (1.0, 1.0)
    interaction: tuple[float, ...] = tuple(1.0 for _ in INTERACTION_KINDS)

    def __post_init__(self):
        if len(self.spatial) != N_SPATIAL or len(self.interaction) != N_RATES:
            raise ValueError("weight vectors must match the concept dimensions")
        values = (*self.spatial, *self.interaction)
        if any(w < 0 for w in values):
            raise ValueError("loss weights must be non-negative")
        if all(w == 0 for w in values):
            raise ValueError("at least one loss weight must be positive")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(
            spatial=tuple(w * factor for w in self.spatial),
            interaction=tuple(w * factor for w in self.interaction),
        )


DEFAULT_LOSS_WEIGHTS = LossWeights()


def spatial_loss(pred: Tensor, true: Tensor) -> Tensor:
    """Squared Euclidean distance between predicted and true spatial factors."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    true = torch.as_tensor(true, dtype=torch.float64)
    return ((pred - true) ** 2).sum()


def interaction_loss(rates: Tensor, counts: Tensor) -> Tensor:
    """Per-type Poisson negative log-likelihood -(y ln rate - rate)."""
    rates = torch.as_tensor(rates, dtype=torch.float64)
    counts = torch.as_tensor(counts, dtype=torch.float64)
    if (rates <= 0).any():
        raise ConceptError("interaction rates must be strictly positive")
    if (counts < 0).any():
        raise ConceptError("interaction counts must be non-negative")
    return -(counts * torch.log(rates) - rates)


@dataclass
class ConceptLoss:
    """Loss terms for one sample; ``spatial`` and ``per_type`` are unweighted."""

    spatial: Tensor  # scalar
    per_type: Tensor  # (7,)
    total: Tensor  # scalar, weighted

    def detach(self) -> tuple[float, tuple[float, ...], float]:
        return (
            float(self.spatial),
            tuple(float(v) for v in self.per_type),
            float(self.total),
        )


def concept_loss(
    model: ConceptModel, sample: ConceptSample, weights: LossWeights = DEFAULT_LOSS_WEIGHTS
) -> ConceptLoss:
    pred = model.predict(sample.arm, sample.subpocket)
    true_spatial = torch.tensor(sample.spatial, dtype=torch.float64)
    sq = (pred.spatial - true_spatial) ** 2
    per_type = interaction_loss(pred.rates, torch.tensor(sample.counts, dtype=torch.float64))
    w_s = torch.tensor(weights.spatial, dtype=torch.float64)
    w_i = torch.tensor(weights.interaction, dtype=torch.float64)
    total = (w_s * sq).sum() + (w_i * per_type).sum()
    return ConceptLoss(spatial=sq.sum(), per_type=per_type, total=total)


Trainable = Union[PairSample, ConceptSample]


def _as_concept_samples(samples: Iterable[Trainable]) -> list[ConceptSample]:
    return [
        s if isinstance(s, ConceptSample) else ConceptSample.from_pair(s) for s in samples
    ]


def dataset_loss(
    model: ConceptModel,
    samples: Sequence[Trainable],
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
) -> float:
    """Mean total loss over a dataset, without gradients."""
    prepared = _as_concept_samples(samples)
    if not prepared:
        raise ConceptError("cannot evaluate loss on an empty dataset")
    with torch.no_grad():
        return float(
            sum(concept_loss(model, s, weights).total for s in prepared) / len(prepared)
        )


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class HistoryRow:
    """Batch-mean loss terms recorded at one optimization step."""

    step: int
    spatial: float
    per_type: tuple[float, ...]
    total: float


def new_concept_state(
    config: TrainingConfig = TrainingConfig(),
    model_config: ConceptConfig = DEFAULT_CONCEPT_CONFIG,
) -> TrainState:
    """Fresh model, optimizer, and batch stream, before any step has run."""
    torch.manual_seed(config.seed)
    model = ConceptModel(model_config)
    return TrainState(
        model=model,
        optimizer=torch.optim.Adam(model.parameters(), lr=config.learning_rate),
        rng=np.random.default_rng(config.seed),
        step=0,
    )


def load_concept_state(path: str | Path) -> TrainState:
    """Reload a checkpoint written by :func:`fraglink.training.save_train_state`."""
    return load_train_state(path, lambda cfg: ConceptModel(ConceptConfig(**cfg)))


def train_concept(
    samples: Sequence[Trainable],
    weights: LossWeights = DEFAULT_LOSS_WEIGHTS,
    config: TrainingConfig = TrainingConfig(),
    model_config: ConceptConfig = DEFAULT_CONCEPT_CONFIG,
    state: TrainState | None = None,
) -> tuple[ConceptModel, list[HistoryRow]]:
    """Adam on batch-mean concept loss; fixed seed fixes init and batches.

    ``state`` resumes a checkpointed run: training continues from its step
    counter up to ``config.steps`` total and advances the state in place.
    """
    prepared = _as_concept_samples(samples)
    if not prepared:
        raise ConceptError("cannot train on an empty dataset")
    if state is None:
        state = new_concept_state(config, model_config)
    model, optimizer, rng = state.model, state.optimizer, state.rng

    history: list[HistoryRow] = []
    for step in range(state.step, config.steps):
        batch = rng.integers(0, len(prepared), size=min(config.batch_size, len(prepared)))
        losses = [concept_loss(model, prepared[i], weights) for i in batch]
        total = torch.stack([l.total for l in losses]).mean()
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        state.step = step + 1
        with torch.no_grad():
            history.append(
                HistoryRow(
                    step=step,
                    spatial=float(torch.stack([l.spatial for l in losses]).mean()),
                    per_type=tuple(
                        float(v)
                        for v in torch.stack([l.per_type for l in losses]).mean(dim=0)
                    ),
                    total=float(total),
                )
            )
    return model, history


def save_loss_curve(history: Sequence[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "spatial", *INTERACTION_KINDS, "total"])
        for row in history:
            writer.writerow([row.step, repr(row.spatial), *map(repr, row.per_type), repr(row.total)])


# --- parameter persistence ---------------------------------------------------

_PARAMS_SCHEMA = 1


def save_params(
    model: ConceptModel, path: str | Path, extra: Mapping | None = None
) -> None:
    """Write config plus every weight tensor; float64 arrays reload bit-exactly.

    ``extra`` entries join the JSON header (provenance such as a config hash)
    and are ignored on load.
    """
    meta = json.dumps(
        {"schema": _PARAMS_SCHEMA, "config": asdict(model.config), **(dict(extra) if extra else {})}
    )
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_params(path: str | Path) -> ConceptModel:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema") != _PARAMS_SCHEMA:
            raise ConceptError(f"unsupported params schema {meta.get('schema')!r}")
        model = ConceptModel(ConceptConfig(**meta["config"]))
        state = {k: torch.from_numpy(data[k]) for k in data.files if k != "__meta__"}
    model.load_state_dict(state)
    return model
