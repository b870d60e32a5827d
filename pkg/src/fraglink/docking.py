"""Client for an external docking executable.

Scoring stays outside the repository: this module only writes inputs, runs
the configured program, and parses the affinity it reports. Every failure
mode maps to a structured result so a batch evaluation never crashes on one
bad target.
"""

from __future__ import annotations

import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

from .chem import MoleculeGraph, ProteinStructure, write_pdb, write_sdf

__all__ = [
    "STATUS_OK",
    "STATUS_PARSE_ERROR",
    "STATUS_PROCESS_ERROR",
    "STATUS_UNAVAILABLE",
    "DockConfig",
    "DockResult",
    "dock_external",
]

STATUS_OK = "ok"
STATUS_UNAVAILABLE = "unavailable"
STATUS_PROCESS_ERROR = "process-error"
STATUS_PARSE_ERROR = "parse-error"


@dataclass(frozen=True)
class DockConfig:
    """Search box and process settings for one docking run."""

    executable: str
    center: tuple[float, float, float]
    size: tuple[float, float, float] = (20.0, 20.0, 20.0)
    minimize: bool = False  # passed through as --local_only, nothing more
    timeout: float = 300.0

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("box center and size must have three components")
        if any(v <= 0 for v in self.size):
            raise ValueError("box size must be positive")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class DockResult:
    """Outcome of one docking attempt; ``score`` is set only for status ok."""

    status: str
    score: float | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


def _resolve_executable(executable: str) -> str | None:
    # Absolute so the child's cwd (the workdir) cannot break a relative path.
    path = Path(executable)
    if path.exists():
        return str(path.resolve())
    found = shutil.which(executable)
    return None if found is None else str(Path(found).resolve())


def _parse_affinity(stdout: str) -> float | None:
    """Affinity in kcal/mol from either output style.

    Preferred: a line ``Affinity: <value> (kcal/mol)``. Fallback: the first
    row of the mode table, ``1  <affinity>  ...``.
    """
    for line in stdout.splitlines():
        stripped = line.strip()
        if stripped.lower().startswith("affinity:"):
            fields = stripped.split()
            if len(fields) >= 2:
                try:
                    return float(fields[1])
                except ValueError:
                    return None
    for line in stdout.splitlines():
        fields = line.split()
        if len(fields) >= 2 and fields[0] == "1":
            try:
                return float(fields[1])
            except ValueError:
                continue
    return None


def dock_external(
    mol: MoleculeGraph,
    protein: ProteinStructure,
    config: DockConfig,
    workdir: str | Path,
) -> DockResult:
    """Run the external docking program on one ligand/receptor pair.

    ``workdir`` receives ``receptor.pdb`` and ``ligand.sdf``; it must be
    unique per target when runs happen concurrently.
    """
    exe = _resolve_executable(config.executable)
    if exe is None:
        return DockResult(
            status=STATUS_UNAVAILABLE,
            detail=f"docking executable not found: {config.executable}",
        )

    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    receptor = workdir / "receptor.pdb"
    ligand = workdir / "ligand.sdf"
    receptor.write_text(write_pdb(protein))
    ligand.write_text(write_sdf(mol))

    argv = [
        exe,
        "--receptor", str(receptor),
        "--ligand", str(ligand),
        "--center_x", str(config.center[0]),
        "--center_y", str(config.center[1]),
        "--center_z", str(config.center[2]),
        "--size_x", str(config.size[0]),
        "--size_y", str(config.size[1]),
        "--size_z", str(config.size[2]),
    ]
    if config.minimize:
        argv.append("--local_only")

    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=config.timeout,
            cwd=workdir,
        )
    except subprocess.TimeoutExpired:
        return DockResult(
            status=STATUS_PROCESS_ERROR,
            detail=f"timed out after {config.timeout:g} s",
        )
    except OSError as exc:
        return DockResult(status=STATUS_PROCESS_ERROR, detail=str(exc))

    if proc.returncode != 0:
        return DockResult(
            status=STATUS_PROCESS_ERROR,
            detail=proc.stderr.strip() or f"exit code {proc.returncode}",
        )

    score = _parse_affinity(proc.stdout)
    if score is None:
        return DockResult(
            status=STATUS_PARSE_ERROR,
            detail="no affinity found in program output",
        )
    return DockResult(status=STATUS_OK, score=score)
