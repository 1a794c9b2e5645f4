"""MAP-Elites grid archive over (total voxels, active voxels)."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import ControllerParams
from .morphology import CppnGenome

MUTATION_KINDS = ("seed", "body", "brain", "pollinated")


@dataclass
class Individual:
    id: int
    parent_id: Optional[int]
    genome: CppnGenome
    params: ControllerParams
    fitness: float
    cell: tuple
    mutation_kind: str
    pollinated_ancestor: bool
    birth_generation: int
    descriptor: tuple = (0, 0)

    def genome_sha(self) -> str:
        return hashlib.sha256(self.genome.to_json().encode()).hexdigest()[:16]

    def params_sha(self) -> str:
        return hashlib.sha256(self.params.to_bytes()).hexdigest()[:16]


def inherits_pollination(parent: Optional[Individual], kind: str) -> bool:
    return kind == "pollinated" or (parent is not None and parent.pollinated_ancestor)


@dataclass
class MigrationEvent:
    generation: int
    from_cell: tuple
    to_cell: tuple
    offspring_id: int
    offspring_fitness: float
    displaced_fitness: Optional[float]
    pollinated_ancestor: bool

    @property
    def subtype(self) -> str:
        """``fill`` when the destination was empty, else ``replace``."""
        return "fill" if self.displaced_fitness is None else "replace"

    def to_dict(self) -> dict:
        return {
            "type": "migration",
            "generation": self.generation,
            "from_cell": list(self.from_cell),
            "to_cell": list(self.to_cell),
            "offspring_id": self.offspring_id,
            "offspring_fitness": self.offspring_fitness,
            "displaced_fitness": self.displaced_fitness,
            "pollinated_ancestor": self.pollinated_ancestor,
            "subtype": self.subtype,
        }


@dataclass
class InsertOutcome:
    status: str  # "new" | "replace" | "rejected"
    migration: Optional[MigrationEvent] = None
    displaced_fitness: Optional[float] = None

    @property
    def accepted(self) -> bool:
        return self.status != "rejected"


def niche_of(descriptor, dims, box_cells: int) -> tuple:
    """Bin (total, active) into equal half-open bins over [0, box_cells]."""
    total, active = descriptor
    d1, d2 = dims
    return (min(d1 - 1, (total * d1) // (box_cells + 1)),
            min(d2 - 1, (active * d2) // (box_cells + 1)))


@dataclass
class Archive:
    dims: tuple
    box_cells: int
    cells: dict = field(default_factory=dict)

    @property
    def bin_bounds(self) -> list:
        """Per-dimension bin edges in descriptor units."""
        return [[k * (self.box_cells + 1) / d for k in range(d + 1)] for d in self.dims]

    def niche_of(self, descriptor) -> tuple:
        return niche_of(descriptor, self.dims, self.box_cells)

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell) -> bool:
        return tuple(cell) in self.cells

    def __getitem__(self, cell) -> Individual:
        return self.cells[tuple(cell)]

    def occupied(self) -> list:
        """Occupied cells in row-major order."""
        return sorted(self.cells)

    def try_insert(self, individual: Individual, parent_cell: Optional[tuple], generation: int = 0) -> InsertOutcome:
        """Elitist offer; ties keep the incumbent.

        An accepted offspring whose cell differs from ``parent_cell`` yields a
        :class:`MigrationEvent`. ``parent_cell=None`` (seed individuals) never
        migrates.
        """
        cell = tuple(individual.cell)
        incumbent = self.cells.get(cell)
        if incumbent is not None and not individual.fitness > incumbent.fitness:
            return InsertOutcome("rejected")
        displaced = None if incumbent is None else incumbent.fitness
        self.cells[cell] = individual
        migration = None
        if parent_cell is not None and tuple(parent_cell) != cell:
            migration = MigrationEvent(generation, tuple(parent_cell), cell, individual.id,
                                       individual.fitness, displaced, individual.pollinated_ancestor)
        return InsertOutcome("new" if incumbent is None else "replace", migration, displaced)

    def put(self, individual: Individual) -> None:
        """Overwrite a cell unconditionally (hillclimb and pollination)."""
        self.cells[tuple(individual.cell)] = individual

    def fitness_grid(self) -> np.ndarray:
        grid = np.full(self.dims, np.nan)
        for (i, j), ind in self.cells.items():
            grid[i, j] = ind.fitness
        return grid

    def best(self) -> Optional[Individual]:
        if not self.cells:
            return None
        return max(self.cells.values(), key=lambda ind: (ind.fitness, -ind.id))


def qd_metrics(archive: Archive) -> tuple:
    """(collection size, total quality, maximal quality); zeros when empty."""
    fits = [ind.fitness for ind in archive.cells.values()]
    if not fits:
        return 0, 0.0, 0.0
    return len(fits), float(math.fsum(fits)), float(max(fits))


def pooled_best(grids) -> np.ndarray:
    """Per-cell maximum over fitness grids (NaN = empty); NaN where never filled."""
    stack = np.stack([np.asarray(g, dtype=float) for g in grids])
    out = np.full(stack.shape[1:], np.nan)
    seen = ~np.isnan(stack).all(axis=0)
    out[seen] = np.nanmax(stack[:, seen], axis=0)
    return out


def reliability(run_grids, best: np.ndarray, opt_in: bool = False) -> list:
    """Mean normalised cell fitness per run.

    Cells whose pooled best is missing or 0 are excluded. Empty cells count
    as 0 unless ``opt_in``, which averages over the run's occupied cells only.
    """
    best = np.asarray(best, dtype=float)
    usable = ~np.isnan(best) & (best != 0)
    out = []
    for grid in run_grids:
        grid = np.asarray(grid, dtype=float)
        mask = usable & ~np.isnan(grid) if opt_in else usable
        if not mask.any():
            out.append(0.0)
            continue
        ratio = np.where(np.isnan(grid), 0.0, grid) / np.where(usable, best, 1.0)
        out.append(float(ratio[mask].mean()))
    return out


def save_archive(archive: Archive, directory) -> None:
    """JSON index plus one little-endian float64 params blob per individual."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    dims_header = None
    for cell in archive.occupied():
        ind = archive.cells[cell]
        (directory / "params" / f"{ind.id}.bin").write_bytes(ind.params.to_bytes())
        dims_header = ind.params.dims
        entries.append({
            "id": ind.id,
            "parent_id": ind.parent_id,
            "cell": list(cell),
            "fitness": ind.fitness,
            "mutation_kind": ind.mutation_kind,
            "pollinated_ancestor": ind.pollinated_ancestor,
            "birth_generation": ind.birth_generation,
            "descriptor": list(ind.descriptor),
            "genome": ind.genome.to_dict(),
            "params_sha": ind.params_sha(),
        })
    index = {"dims": list(archive.dims), "box_cells": archive.box_cells,
             "params_header": {"dtype": "<f8", "order": ["W1", "b1", "W2", "b2"], **(dims_header or {})},
             "individuals": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_archive(directory) -> Archive:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    head = index["params_header"]
    archive = Archive(tuple(index["dims"]), index["box_cells"])
    for e in index["individuals"]:
        params = ControllerParams.from_bytes((directory / "params" / f"{e['id']}.bin").read_bytes(),
                                             head["n_in"], head["n_hidden"], head["n_out"])
        archive.put(Individual(
            id=e["id"], parent_id=e["parent_id"], genome=CppnGenome.from_dict(e["genome"]),
            params=params, fitness=e["fitness"], cell=tuple(e["cell"]),
            mutation_kind=e["mutation_kind"], pollinated_ancestor=e["pollinated_ancestor"],
            birth_generation=e["birth_generation"], descriptor=tuple(e["descriptor"]),
        ))
    return archive
