"""Serializable training state so a run can stop and resume bit-exactly.

A checkpoint freezes four things: model weights, Adam moments, the numpy
generator that drives batch and noise draws, and the step counter. Restoring
all four makes a resumed run indistinguishable from an uninterrupted one
with the same seed and total step count.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "CHECKPOINT_SCHEMA",
    "CheckpointError",
    "TrainState",
    "load_train_state",
    "save_train_state",
]

CHECKPOINT_SCHEMA = 1


class CheckpointError(RuntimeError):
    """Checkpoint file malformed or from an unsupported schema."""


@dataclass
class TrainState:
    """Mutable bundle a training loop advances in place."""

    model: torch.nn.Module
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0


def save_train_state(
    state: TrainState, path: str | Path, extra: Mapping | None = None
) -> None:
    """One npz: model arrays under ``model::``, Adam moments under ``opt::``.

    ``extra`` entries are merged into the JSON header, e.g. a config hash.
    """
    opt_state = state.optimizer.state_dict()["state"]
    n_params = sum(1 for _ in state.model.parameters())
    arrays = {
        f"model::{k}": v.detach().numpy() for k, v in state.model.state_dict().items()
    }
    opt_steps: list[float | None] = []
    step_is_tensor = False
    for i in range(n_params):
        entry = opt_state.get(i)
        if entry is None:
            opt_steps.append(None)  # parameter never updated yet
            continue
        step_is_tensor = isinstance(entry["step"], torch.Tensor)
        opt_steps.append(float(entry["step"]))
        arrays[f"opt::{i}::exp_avg"] = entry["exp_avg"].detach().numpy()
        arrays[f"opt::{i}::exp_avg_sq"] = entry["exp_avg_sq"].detach().numpy()
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "model_config": asdict(state.model.config),
        "step": state.step,
        "lr": state.optimizer.param_groups[0]["lr"],
        "rng_state": state.rng.bit_generator.state,
        "opt_steps": opt_steps,
        "opt_step_is_tensor": step_is_tensor,
        **(dict(extra) if extra else {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, default=int)), **arrays)


def load_train_state(
    path: str | Path, model_factory: Callable[[dict], torch.nn.Module]
) -> TrainState:
    """Rebuild a :class:`TrainState`; ``model_factory`` maps the stored
    config dict to a fresh model of the right architecture."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(f"unsupported checkpoint schema {meta.get('schema')}")
        model = model_factory(meta["model_config"])
        model.load_state_dict(
            {
                k.removeprefix("model::"): torch.from_numpy(np.array(data[k]))
                for k in data.files
                if k.startswith("model::")
            }
        )
        optimizer = torch.optim.Adam(model.parameters(), lr=meta["lr"])
        entries: dict[int, dict] = {}
        for i, step_value in enumerate(meta["opt_steps"]):
            if step_value is None:
                continue
            entries[i] = {
                "step": (
                    torch.tensor(float(step_value))
                    if meta["opt_step_is_tensor"]
                    else int(step_value)
                ),
                "exp_avg": torch.from_numpy(np.array(data[f"opt::{i}::exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(data[f"opt::{i}::exp_avg_sq"])),
            }
    if entries:
        fresh = optimizer.state_dict()
        optimizer.load_state_dict(
            {"state": entries, "param_groups": fresh["param_groups"]}
        )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model=model, optimizer=optimizer, rng=rng, step=int(meta["step"]))
