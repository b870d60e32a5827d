"""Command-line pipeline: prepare data, train both stages, generate, evaluate.

Every subcommand reads one JSON configuration and writes its artifacts under
the configured output directory, each directory with a ``manifest.json``
carrying the configuration hash and the seed that produced it. Outputs are
byte-reproducible for a fixed (config, seed, inputs) triple; nothing written
here embeds a timestamp.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .chem import (
    MoleculeGraph,
    ParseError,
    ProteinStructure,
    parse_pdb,
    parse_sdf,
    parse_sdf_multi,
    write_sdf,
)
from .concept import (
    ELEMENT_INDEX,
    ConceptError,
    TrainingError,
    load_concept_state,
    new_concept_state,
    train_concept,
)
from .concept import load_params as load_concept_params
from .concept import save_loss_curve as save_concept_loss_curve
from .concept import save_params as save_concept_params
from .config import (
    ConfigError,
    RunConfig,
    concept_model_config,
    concept_training_config,
    config_hash,
    diffusion_model_config,
    diffusion_training_config,
    effective_weights,
    load_config,
)
from .dataset import (
    DatasetError,
    build_pairs,
    ligand_decomposition,
    load_jsonl,
    save_jsonl,
    slice_context,
)
from .diffusion import (
    DiffusionError,
    build_prior,
    load_diffusion_state,
    load_pairs_jsonl,
    load_size_histogram,
    make_schedule,
    new_diffusion_state,
    sample_scaffold,
    save_pairs_jsonl,
    save_size_histogram,
    scaffold_size,
    size_histogram,
    train_diffusion,
    training_pair,
)
from .diffusion import load_params as load_denoiser_params
from .diffusion import save_loss_curve as save_diffusion_loss_curve
from .diffusion import save_params as save_diffusion_params
from .docking import STATUS_OK, DockConfig, dock_external
from .fragment import DecompositionError
from .geom import pairwise_distances
from .metrics import (
    JSD_BINS,
    JSD_RANGE,
    bond_keys,
    bond_lengths,
    evaluate_molecules,
    save_report_csv,
    save_report_json,
)
from .pocket import EmptySubpocketError, extract_subpocket, subpocket_from_residues
from .sampler import SamplerError, library_report, load_library, sample_arms
from .training import CheckpointError, save_train_state

__all__ = ["main", "run"]

log = logging.getLogger("fraglink.cli")

# Padding added around a posed molecule when deriving its docking search box.
DOCK_BOX_MARGIN = 8.0


class _ListHandler(logging.Handler):
    """Collects warning messages so skip reasons land in a log file."""

    def __init__(self, records: list[str]):
        super().__init__(level=logging.WARNING)
        self.records = records

    def emit(self, record: logging.LogRecord) -> None:
        self.records.append(record.getMessage())


def _write_manifest(
    directory: Path, command: str, config: RunConfig, counts: dict, files: list[str]
) -> None:
    payload = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "counts": counts,
        "files": sorted(files),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prior_context(
    protein: ProteinStructure, coords: np.ndarray, radius: float
) -> tuple[tuple[int, ...], np.ndarray]:
    """Supported-element, non-solvent protein atoms near ``coords``.

    Metals and other elements outside the supported set are dropped rather
    than rejected; the denoiser has no embedding for them.
    """
    keep = [
        a.index
        for a in protein.atoms
        if not a.is_solvent and a.element in ELEMENT_INDEX
    ]
    if not keep or not len(coords):
        return (), np.zeros((0, 3))
    near = pairwise_distances(protein.coords[keep], coords).min(axis=1) <= radius
    picked = [i for i, flag in zip(keep, near) if flag]
    elements = tuple(protein.atoms[i].element for i in picked)
    return elements, protein.coords[picked]


# -- prepare-data --------------------------------------------------------------


def cmd_prepare_data(config: RunConfig, args: argparse.Namespace) -> int:
    data_dir = Path(config.data_dir)
    if not data_dir.is_dir():
        log.error("data directory %s does not exist", data_dir)
        return 2
    out = Path(config.output_dir) / "dataset"
    out.mkdir(parents=True, exist_ok=True)

    skipped: list[str] = []
    complexes: list[tuple[str, ProteinStructure, MoleculeGraph]] = []
    for sdf_path in sorted(data_dir.glob("*.sdf")):
        pdb_path = sdf_path.with_suffix(".pdb")
        if not pdb_path.exists():
            skipped.append(f"{sdf_path.name}: no matching {pdb_path.name}")
            continue
        try:
            ligand = parse_sdf(sdf_path.read_text(), name=sdf_path.stem)
            protein = parse_pdb(pdb_path.read_text(), name=pdb_path.stem)
        except (OSError, ParseError) as exc:
            skipped.append(f"{sdf_path.stem}: {exc}")
            continue
        complexes.append((sdf_path.stem, protein, ligand))
    if not complexes:
        log.warning("no usable complexes under %s; writing an empty dataset", data_dir)

    handler = _ListHandler(skipped)
    dataset_log = logging.getLogger("fraglink.dataset")
    dataset_log.addHandler(handler)
    try:
        pairs = build_pairs(complexes)
    finally:
        dataset_log.removeHandler(handler)
    save_jsonl(pairs, out / "pairs.jsonl")

    # The same decompositions feed the scaffold stage: clean diffusion pairs
    # plus the empirical scaffold-size histogram used at generation time.
    scaffold_pairs = []
    decomps = []
    for complex_id, protein, ligand in complexes:
        try:
            decomp = ligand_decomposition(protein, ligand)
        except (DatasetError, DecompositionError):
            continue  # reason already logged while building pairs
        heavy = ligand.coords[list(ligand.heavy_indices())]
        elements, coords = _prior_context(protein, heavy, radius=args.context_radius)
        scaffold_pairs.append(training_pair(decomp, elements, coords))
        decomps.append(decomp)
    save_pairs_jsonl(scaffold_pairs, out / "scaffolds.jsonl")
    save_size_histogram(size_histogram(decomps), out / "sizes.json")

    (out / "skipped.log").write_text(
        "".join(line + "\n" for line in skipped)
    )
    counts = {
        "complexes": len(complexes),
        "pairs": len(pairs),
        "scaffold_pairs": len(scaffold_pairs),
        "skipped": len(skipped),
    }
    _write_manifest(
        out,
        "prepare-data",
        config,
        counts,
        ["pairs.jsonl", "scaffolds.jsonl", "sizes.json", "skipped.log"],
    )
    log.info(
        "prepared %d pairs and %d scaffold pairs from %d complexes",
        len(pairs),
        len(scaffold_pairs),
        len(complexes),
    )
    return 0


# -- training ------------------------------------------------------------------


def cmd_train_concept(config: RunConfig, args: argparse.Namespace) -> int:
    pairs_path = Path(config.output_dir) / "dataset" / "pairs.jsonl"
    if not pairs_path.exists():
        log.error("no dataset at %s; run prepare-data first", pairs_path)
        return 2
    try:
        samples = load_jsonl(pairs_path)
    except DatasetError as exc:
        log.error("cannot load %s: %s", pairs_path, exc)
        return 2
    if not samples:
        log.error("dataset at %s is empty; nothing to train on", pairs_path)
        return 2

    model_config = concept_model_config(config)
    training = concept_training_config(config)
    if args.resume:
        try:
            state = load_concept_state(args.resume)
        except CheckpointError as exc:
            log.error("%s", exc)
            return 2
        if state.model.config != model_config:
            log.error(
                "checkpoint architecture %s does not match the configured %s",
                state.model.config,
                model_config,
            )
            return 2
    else:
        state = new_concept_state(training, model_config)

    try:
        model, history = train_concept(
            samples, effective_weights(config), training, model_config, state=state
        )
    except TrainingError as exc:
        log.error("training failed: %s", exc)
        return 3

    out = Path(config.output_dir) / "concept"
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config_hash": config_hash(config)}
    save_concept_params(model, out / "params.npz", extra=extra)
    save_train_state(state, out / "checkpoint.npz", extra=extra)
    save_concept_loss_curve(history, out / "loss.csv")
    counts = {"samples": len(samples), "steps": state.step}
    _write_manifest(
        out, "train-concept", config, counts, ["params.npz", "checkpoint.npz", "loss.csv"]
    )
    log.info("concept model trained to step %d; params at %s", state.step, out)
    return 0


def cmd_train_diffusion(config: RunConfig, args: argparse.Namespace) -> int:
    pairs_path = Path(config.output_dir) / "dataset" / "scaffolds.jsonl"
    if not pairs_path.exists():
        log.error("no scaffold dataset at %s; run prepare-data first", pairs_path)
        return 2
    try:
        samples = load_pairs_jsonl(pairs_path)
    except DiffusionError as exc:
        log.error("cannot load %s: %s", pairs_path, exc)
        return 2
    if not samples:
        log.error("scaffold dataset at %s is empty; nothing to train on", pairs_path)
        return 2

    model_config = diffusion_model_config(config)
    training = diffusion_training_config(config)
    sched = make_schedule(config.diffusion.timesteps, config.diffusion.mode)
    if args.resume:
        try:
            state = load_diffusion_state(args.resume)
        except CheckpointError as exc:
            log.error("%s", exc)
            return 2
        if state.model.config != model_config:
            log.error(
                "checkpoint architecture %s does not match the configured %s",
                state.model.config,
                model_config,
            )
            return 2
    else:
        state = new_diffusion_state(training, model_config)

    try:
        model, history = train_diffusion(
            samples, sched, training, model_config, state=state
        )
    except TrainingError as exc:
        log.error("training failed: %s", exc)
        return 3

    out = Path(config.output_dir) / "diffusion"
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config_hash": config_hash(config)}
    save_diffusion_params(model, out / "params.npz", extra=extra)
    save_train_state(state, out / "checkpoint.npz", extra=extra)
    save_diffusion_loss_curve(history, out / "loss.csv")
    counts = {"samples": len(samples), "steps": state.step}
    _write_manifest(
        out,
        "train-diffusion",
        config,
        counts,
        ["params.npz", "checkpoint.npz", "loss.csv"],
    )
    log.info("denoiser trained to step %d; params at %s", state.step, out)
    return 0


# -- generation ------------------------------------------------------------


def _parse_residue_spec(spec: str) -> list[list[tuple[str, int]]]:
    """``A:12,A:15;B:7`` gives one (chain, number) list per subpocket."""
    groups: list[list[tuple[str, int]]] = []
    for part in spec.split(";"):
        pairs: list[tuple[str, int]] = []
        for token in part.split(","):
            token = token.strip()
            if not token:
                continue
            chain, sep, number = token.partition(":")
            if not sep or not chain.strip() or not number.strip():
                raise ValueError(
                    f"bad residue {token!r}; expected chain:number, e.g. A:42"
                )
            try:
                pairs.append((chain.strip(), int(number)))
            except ValueError:
                raise ValueError(f"residue number in {token!r} is not an integer")
        if pairs:
            groups.append(pairs)
    if not groups:
        raise ValueError("residue list is empty")
    return groups


def _subpockets_from_ligand(protein: ProteinStructure, ligand: MoleculeGraph):
    """One subpocket per reference-ligand arm, carved in a sliced context."""
    decomp = ligand_decomposition(protein, ligand)
    subpockets = []
    for k, assignment in enumerate(decomp.arms):
        context = slice_context(protein, assignment.fragment)
        arm = assignment.fragment.standalone()
        try:
            subpockets.append(extract_subpocket(context, arm, subpocket_id=k))
        except EmptySubpocketError as exc:
            log.warning("dropping subpocket %d: %s", k, exc)
    return subpockets


def cmd_generate(config: RunConfig, args: argparse.Namespace) -> int:
    if args.samples < 0:
        log.error("--samples must be >= 0, got %d", args.samples)
        return 2
    base = Path(config.output_dir)
    concept_path = base / "concept" / "params.npz"
    denoiser_path = base / "diffusion" / "params.npz"
    for path, cmd in ((concept_path, "train-concept"), (denoiser_path, "train-diffusion")):
        if not path.exists():
            log.error("missing %s; run %s first", path, cmd)
            return 2
    try:
        model = load_concept_params(concept_path)
        denoiser = load_denoiser_params(denoiser_path)
    except (OSError, ConceptError, DiffusionError) as exc:
        log.error("cannot load trained parameters: %s", exc)
        return 2

    try:
        protein = parse_pdb(
            Path(args.protein).read_text(), name=Path(args.protein).stem
        )
    except (OSError, ParseError) as exc:
        log.error("cannot read protein %s: %s", args.protein, exc)
        return 2

    if args.ligand:
        try:
            ligand = parse_sdf(
                Path(args.ligand).read_text(), name=Path(args.ligand).stem
            )
            subpockets = _subpockets_from_ligand(protein, ligand)
        except (OSError, ParseError, DatasetError, DecompositionError) as exc:
            log.error("cannot derive subpockets from %s: %s", args.ligand, exc)
            return 2
    else:
        try:
            groups = _parse_residue_spec(args.residues)
            subpockets = [
                subpocket_from_residues(protein, group, subpocket_id=k)
                for k, group in enumerate(groups)
            ]
        except (ValueError, EmptySubpocketError) as exc:
            log.error("cannot derive subpockets from --residues: %s", exc)
            return 2
    if not subpockets:
        log.error("no usable subpockets; nothing to generate")
        return 2

    try:
        library = load_library(config.library_file)
    except (OSError, SamplerError) as exc:
        log.error("cannot load arm library %s: %s", config.library_file, exc)
        return 2
    weights = effective_weights(config)

    hist = None
    if config.generate.scaffold_size == 0:
        sizes_path = base / "dataset" / "sizes.json"
        if not sizes_path.exists():
            log.error(
                "no size histogram at %s; run prepare-data or set "
                "generate.scaffold_size",
                sizes_path,
            )
            return 2
        try:
            hist = load_size_histogram(sizes_path)
        except DiffusionError as exc:
            log.error("cannot load %s: %s", sizes_path, exc)
            return 2
        if not hist.pooled():
            log.error(
                "size histogram at %s is empty; set generate.scaffold_size",
                sizes_path,
            )
            return 2

    sched = make_schedule(config.diffusion.timesteps, config.diffusion.mode)
    out = base / "generated"
    out.mkdir(parents=True, exist_ok=True)
    run_hash = config_hash(config)
    files: list[str] = []
    counts = {
        "requested": args.samples,
        "written": 0,
        "disconnected": 0,
        "unlinked_arms": 0,
        "no_arms": 0,
        "subpockets": len(subpockets),
        "unfillable_subpockets": 0,
    }
    warned_unfillable = False
    for k in range(args.samples):
        sample_seed = config.seed + k
        report = sample_arms(
            model,
            subpockets,
            library,
            weights,
            k=1,
            mode=config.generate.selection_mode,
            tau=config.generate.tau,
            seed=sample_seed,
        )
        counts["unfillable_subpockets"] = len(report.unfillable)
        if report.unfillable and not warned_unfillable:
            log.warning(
                "no library entry fits subpocket(s) %s; continuing without them",
                list(report.unfillable),
            )
            warned_unfillable = True
        arms = [sel.chosen[0].posed for sel in report.selections if sel.chosen]
        if not arms:
            counts["no_arms"] += 1
            continue

        n_scaffold = config.generate.scaffold_size or scaffold_size(
            hist, len(arms), seed=sample_seed
        )
        arm_heavy = np.concatenate([a.heavy_coords() for a in arms])
        elements, coords = _prior_context(protein, arm_heavy, radius=args.context_radius)
        prior = build_prior(arms, elements, coords, n_scaffold)
        scaffold = sample_scaffold(denoiser, prior, n_scaffold, sched, seed=sample_seed)
        result = assemble_from(arms, scaffold, prior)

        stem = f"gen-{k:04d}"
        molecule = replace(result.molecule, name=f"{stem}-{run_hash[:12]}")
        (out / f"{stem}.sdf").write_text(write_sdf(molecule))
        payload = {
            "sample": k,
            "seed": sample_seed,
            "config_hash": run_hash,
            "scaffold_atoms": n_scaffold,
            "disconnected": result.disconnected,
            "rejected_scaffold": list(result.rejected_scaffold),
            "unlinked": list(result.unlinked),
            "selection": library_report(report, weights),
        }
        (out / f"{stem}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
        files += [f"{stem}.sdf", f"{stem}.json"]
        counts["written"] += 1
        counts["disconnected"] += int(result.disconnected)
        counts["unlinked_arms"] += len(result.unlinked)

    _write_manifest(out, "generate", config, counts, files)
    log.info(
        "wrote %d of %d molecules (%d disconnected) under %s",
        counts["written"],
        args.samples,
        counts["disconnected"],
        out,
    )
    return 0


# -- evaluation --------------------------------------------------------------


def _read_sdf_dir(directory: Path, label: str) -> list[MoleculeGraph] | None:
    if not directory.is_dir():
        log.error("%s directory %s does not exist", label, directory)
        return None
    mols: list[MoleculeGraph] = []
    for path in sorted(directory.glob("*.sdf")):
        try:
            mols.extend(parse_sdf_multi(path.read_text(), name=path.stem))
        except (OSError, ParseError) as exc:
            log.error("cannot read %s: %s", path, exc)
            return None
    if not mols:
        log.error("no molecules under %s", directory)
        return None
    return mols


def _dock_box(mol: MoleculeGraph) -> tuple[tuple[float, ...], tuple[float, ...]]:
    xyz = mol.coords
    center = xyz.mean(axis=0)
    size = xyz.max(axis=0) - xyz.min(axis=0) + 2.0 * DOCK_BOX_MARGIN
    return tuple(float(v) for v in center), tuple(float(v) for v in size)


def _plot_bond_histograms(
    ref_mols: Sequence[MoleculeGraph],
    gen_mols: Sequence[MoleculeGraph],
    directory: Path,
) -> list[str]:
    """One overlaid reference/generated histogram per bond-distance key."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    files = []
    for key in bond_keys(tuple(ref_mols) + tuple(gen_mols)):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, mols, color in (
            ("reference", ref_mols, "tab:blue"),
            ("generated", gen_mols, "tab:orange"),
        ):
            lengths = bond_lengths(mols, key)
            if len(lengths):
                ax.hist(
                    lengths,
                    bins=JSD_BINS,
                    range=JSD_RANGE,
                    density=True,
                    alpha=0.55,
                    color=color,
                    label=label,
                )
        ax.set_xlabel("bond length (A)")
        ax.set_ylabel("density")
        ax.set_title(key.label)
        ax.legend(loc="upper right")
        fig.tight_layout()
        name = f"bond-{key.label.replace('|', '-')}.png"
        fig.savefig(directory / name, dpi=120, metadata={"Software": "fraglink"})
        plt.close(fig)
        files.append(name)
    return files


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    gen_mols = _read_sdf_dir(Path(args.gen), "generated")
    if gen_mols is None:
        return 2
    ref_mols = _read_sdf_dir(Path(args.ref), "reference")
    if ref_mols is None:
        return 2

    out = Path(config.output_dir) / "evaluation"
    (out / "plots").mkdir(parents=True, exist_ok=True)

    scores: list[float] = []
    failures: dict[str, int] = {}
    if config.docking_executable and args.receptor:
        try:
            receptor = parse_pdb(
                Path(args.receptor).read_text(), name=Path(args.receptor).stem
            )
        except (OSError, ParseError) as exc:
            log.error("cannot read receptor %s: %s", args.receptor, exc)
            return 2
        for idx, mol in enumerate(gen_mols):
            center, size = _dock_box(mol)
            dock_config = DockConfig(
                executable=config.docking_executable,
                center=center,
                size=size,
                minimize=True,
            )
            result = dock_external(mol, receptor, dock_config, out / "docking" / f"{idx:04d}")
            if result.status == STATUS_OK:
                scores.append(result.score)
            else:
                failures[result.status] = failures.get(result.status, 0) + 1
    elif config.docking_executable:
        log.warning("docking executable configured but --receptor missing; skipping")

    report = evaluate_molecules(ref_mols, gen_mols, docking=scores, failures=failures)
    save_report_json(report, out / "report.json")
    save_report_csv(report, out / "report.csv")
    plot_files = [
        f"plots/{name}"
        for name in _plot_bond_histograms(ref_mols, gen_mols, out / "plots")
    ]
    counts = {
        "generated": len(gen_mols),
        "reference": len(ref_mols),
        "docked": len(scores),
        "docking_failures": sum(failures.values()),
    }
    _write_manifest(
        out,
        "evaluate",
        config,
        counts,
        ["report.json", "report.csv"] + plot_files,
    )
    log.info("evaluation report for %d molecules at %s", len(gen_mols), out)
    return 0


# -- wiring ------------------------------------------------------------------


def _parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", default=None, help="override the configured output directory")
    common.add_argument(
        "--docking-exe", default=None, help="override the configured docking executable"
    )

    parser = argparse.ArgumentParser(
        prog="fraglink",
        description="Fragment-based, pocket-conditioned molecule generation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "prepare-data",
        parents=[common],
        help="build concept pairs and scaffold data from a complex directory",
    )
    p.set_defaults(handler=cmd_prepare_data)

    p = sub.add_parser(
        "train-concept", parents=[common], help="train the arm-scoring concept model"
    )
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.set_defaults(handler=cmd_train_concept)

    p = sub.add_parser(
        "train-diffusion", parents=[common], help="train the scaffold denoiser"
    )
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p.set_defaults(handler=cmd_train_diffusion)

    p = sub.add_parser(
        "generate", parents=[common], help="sample arms and scaffolds for one pocket"
    )
    p.add_argument("--protein", required=True, help="receptor PDB file")
    pocket = p.add_mutually_exclusive_group(required=True)
    pocket.add_argument(
        "--ligand", help="reference ligand SDF whose pose defines the subpockets"
    )
    pocket.add_argument(
        "--residues",
        help="pocket residues as chain:number lists; ';' separates subpockets",
    )
    p.add_argument("--samples", type=int, default=10, help="molecules to generate")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser(
        "evaluate", parents=[common], help="score a generated set against a reference"
    )
    p.add_argument("--gen", required=True, help="directory of generated SDF files")
    p.add_argument("--ref", required=True, help="directory of reference SDF files")
    p.add_argument("--receptor", default=None, help="receptor PDB enabling docking scores")
    p.set_defaults(handler=cmd_evaluate)

    return parser.parse_args(argv)


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, apply overrides, and dispatch; returns the exit code."""
    args = _parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # single-threaded reductions keep reruns bit-equal

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    if args.docking_exe is not None:
        config = replace(config, docking_executable=args.docking_exe)

    try:
        return args.handler(config, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2


def main() -> None:
    sys.exit(run())
