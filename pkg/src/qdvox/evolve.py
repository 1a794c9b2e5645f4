"""Generation loop for the Standard, No-Migration and Pollination treatments.

Every random draw comes from a generator seeded by a tuple
``(master_seed, stream, generation, index, ...)``, so a run is a pure function
of its config: worker count does not matter and resuming from a checkpoint
needs no saved generator state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import controller as ctl
from . import morphology as morph
from .archive import (Archive, Individual, inherits_pollination, load_archive, qd_metrics,
                      save_archive)
from .config import RunConfig
from .errors import DegenerateDataset, EmptyMorphology, ResumeMismatch
from .sim import build_body, rollout

log = logging.getLogger(__name__)

# seed stream tags
BOOTSTRAP = 1
SELECT = 2
MUTATE = 3
EVAL = 4
POLLINATE = 5
DATASET = 6
DISTILL = 7
POLL_EVAL = 8

METRIC_COLUMNS = ("generation", "collection_size", "total_quality", "maximal_quality",
                  "migrations_cum", "best_fitness")


def seed_for(master_seed: int, *parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), *(int(p) for p in parts)])


def rng_for(master_seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng(seed_for(master_seed, *parts))


@dataclass
class EvalResult:
    fitness: float
    valid: bool
    reason: str  # "ok" | "empty" | "blowup"
    descriptor: Optional[tuple] = None
    scores: list = field(default_factory=list)


def evaluate(genome, params, gen: int, idx: int, cfg: RunConfig, stream: int = EVAL,
             rollout_fn: Optional[Callable] = None) -> EvalResult:
    """Mean fitness over ``evals_per_individual`` noisy rollouts.

    Rollout ``e`` is seeded from ``(master_seed, stream, gen, idx, e)``. An
    empty morphology, or one whose every rollout blew up, is invalid with
    fitness 0. Blown-up rollouts otherwise count as 0 in the mean.
    """
    width, height = cfg.box
    try:
        m = morph.decode(genome, width, height)
    except EmptyMorphology:
        return EvalResult(0.0, False, "empty")
    n = cfg.treatment.evals_per_individual
    seeds = [seed_for(cfg.treatment.master_seed, stream, gen, idx, e) for e in range(n)]
    if rollout_fn is not None:
        scores = [float(rollout_fn(m, params, s)) for s in seeds]
        return EvalResult(math.fsum(scores) / n, True, "ok", m.descriptor, scores)
    body = build_body(m, cfg.task)
    results = [rollout(body, params, s, cfg.task, cfg.noise.obs_sigma, cfg.noise.act_sigma)
               for s in seeds]
    scores = [r.fitness for r in results]
    if all(r.status == "blowup" for r in results):
        return EvalResult(0.0, False, "blowup", m.descriptor, scores)
    return EvalResult(math.fsum(scores) / n, True, "ok", m.descriptor, scores)


def _evaluate_job(job):
    return evaluate(*job)


class Evaluator:
    """Order-preserving map of :func:`evaluate` over an optional process pool."""

    def __init__(self, workers: int = 1):
        self.workers = workers
        self._pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, jobs: list) -> list:
        if self._pool is None:
            return [_evaluate_job(j) for j in jobs]
        return list(self._pool.map(_evaluate_job, jobs))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _dump(record: dict) -> bytes:
    return (json.dumps(record, sort_keys=True, allow_nan=False) + "\n").encode()


class RunLog:
    """Append-only ``events.jsonl`` and ``metrics.csv`` with byte offsets for resume."""

    def __init__(self, run_dir: Path, cfg: RunConfig, fresh: bool = True):
        self.run_dir = run_dir
        self.events_path = run_dir / "events.jsonl"
        self.metrics_path = run_dir / "metrics.csv"
        if fresh:
            self.events_path.write_bytes(_dump({"type": "header", "tool": cfg.header(),
                                                "config_hash": cfg.hash()}))
            self.metrics_path.write_bytes(
                f"# {cfg.header()}\n{','.join(METRIC_COLUMNS)}\n".encode())
        self._events = open(self.events_path, "ab")
        self._metrics = open(self.metrics_path, "ab")

    def event(self, record: dict) -> None:
        self._events.write(_dump(record))

    def metrics(self, row: dict) -> None:
        self._metrics.write((",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n").encode())

    def offsets(self) -> tuple:
        self._events.flush()
        self._metrics.flush()
        return self._events.tell(), self._metrics.tell()

    def close(self):
        self._events.close()
        self._metrics.close()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _cell(value):
    return None if value is None else list(value)


@dataclass
class RunState:
    cfg: RunConfig
    archive: Archive
    generation: int = 0
    next_id: int = 0
    hillclimb_cursor: int = 0
    migrations_cum: int = 0
    best_fitness: Optional[float] = None
    frozen_cells: Optional[list] = None

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def saw(self, fitness: float) -> None:
        if self.best_fitness is None or fitness > self.best_fitness:
            self.best_fitness = fitness


def _offspring_record(gen, phase, idx, child_id, parent, kind, res, cell, outcome,
                      migration=False, displaced=None, flag=False, genome=None, params=None):
    return {
        "type": "offspring",
        "generation": gen,
        "phase": phase,
        "index": idx,
        "id": child_id,
        "parent_id": None if parent is None else parent.id,
        "kind": kind,
        "parent_fitness": None if parent is None else parent.fitness,
        "fitness": res.fitness,
        "parent_cell": None if parent is None else list(parent.cell),
        "cell": _cell(cell),
        "descriptor": _cell(res.descriptor),
        "outcome": outcome,
        "migration": migration,
        "displaced_fitness": displaced,
        "pollinated_ancestor": flag,
        "genome_sha": _sha(genome.to_json().encode()),
        "params_sha": _sha(params.to_bytes()),
    }


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def bootstrap(state: RunState, evaluator: Evaluator, runlog: RunLog, max_attempts: int = 100_000) -> None:
    """Offer random genome/controller pairs until ``bootstrap_size`` valid ones are in."""
    cfg = state.cfg
    tc = cfg.treatment
    n_in, n_out = ctl.dims_for_box(*cfg.box)
    valid = 0
    k = 0
    batch = max(tc.bootstrap_size, 1)
    while valid < tc.bootstrap_size:
        if k >= max_attempts:
            raise RuntimeError(f"no valid individuals after {max_attempts} random genomes")
        cands = []
        for j in range(k, k + batch):
            rng = rng_for(tc.master_seed, BOOTSTRAP, j)
            cands.append((morph.initial_genome(rng), ctl.init_params(n_in, n_out, rng)))
        results = evaluator.map([(g, p, 0, j, cfg) for j, (g, p) in zip(range(k, k + batch), cands)])
        for j, ((genome, params), res) in zip(range(k, k + batch), zip(cands, results)):
            if valid >= tc.bootstrap_size:
                break
            if not res.valid:
                continue
            valid += 1
            child = Individual(state.new_id(), None, genome, params, res.fitness,
                               state.archive.niche_of(res.descriptor), "seed", False, 0, res.descriptor)
            state.saw(res.fitness)
            out = state.archive.try_insert(child, None, 0)
            runlog.event(_offspring_record(0, "bootstrap", j, child.id, None, "seed", res, child.cell,
                                           out.status, False, out.displaced_fitness, False, genome, params))
        k += batch


def _make_offspring(state: RunState, parent: Individual, gen: int, idx: int):
    cfg = state.cfg
    rng = rng_for(cfg.treatment.master_seed, MUTATE, gen, idx)
    if rng.random() < cfg.treatment.body_vs_brain_prob:
        return "body", morph.mutate(parent.genome, rng), parent.params
    return "brain", parent.genome, ctl.mutate(parent.params, rng, cfg.noise.mutation_sigma)


def run_generation(state: RunState, evaluator: Evaluator, runlog: RunLog, gen: int) -> None:
    """One MAP-Elites generation: uniform parent draws, mutate, evaluate, offer in order."""
    cfg = state.cfg
    occupied = state.archive.occupied()
    rng = rng_for(cfg.treatment.master_seed, SELECT, gen)
    parents = [state.archive[occupied[rng.integers(len(occupied))]]
               for _ in range(cfg.treatment.parents_per_gen)]
    children = [_make_offspring(state, p, gen, i) for i, p in enumerate(parents)]
    results = evaluator.map([(g, p, gen, i, cfg) for i, (_, g, p) in enumerate(children)])
    for idx, (parent, (kind, genome, params), res) in enumerate(zip(parents, children, results)):
        child_id = state.new_id()
        flag = inherits_pollination(parent, kind)
        if not res.valid:
            runlog.event(_offspring_record(gen, "map_elites", idx, child_id, parent, kind, res, None,
                                           "invalid", flag=flag, genome=genome, params=params))
            runlog.event({"type": "invalid", "generation": gen, "id": child_id, "reason": res.reason})
            continue
        state.saw(res.fitness)
        child = Individual(child_id, parent.id, genome, params, res.fitness,
                           state.archive.niche_of(res.descriptor), kind, flag, gen, res.descriptor)
        out = state.archive.try_insert(child, parent.cell, gen)
        runlog.event(_offspring_record(gen, "map_elites", idx, child_id, parent, kind, res, child.cell,
                                       out.status, out.migration is not None, out.displaced_fitness,
                                       flag, genome, params))
        if out.migration is not None:
            state.migrations_cum += 1
            runlog.event(out.migration.to_dict())


def hillclimb_phase(state: RunState, evaluator: Evaluator, runlog: RunLog, gen: int) -> None:
    """Parallel hillclimbing: each frozen cell improves its champion in place.

    Hillclimbers are served round-robin over the cells occupied when the
    phase began; a mutant replaces its champion only if strictly fitter and
    never moves to another cell.
    """
    cfg = state.cfg
    if state.frozen_cells is None:
        state.frozen_cells = state.archive.occupied()
    cells = state.frozen_cells
    picks = []
    for _ in range(cfg.treatment.parents_per_gen):
        picks.append(cells[state.hillclimb_cursor % len(cells)])
        state.hillclimb_cursor += 1
    parents = [state.archive[c] for c in picks]
    children = [_make_offspring(state, p, gen, i) for i, p in enumerate(parents)]
    results = evaluator.map([(g, p, gen, i, cfg) for i, (_, g, p) in enumerate(children)])
    for idx, (cell, parent, (kind, genome, params), res) in enumerate(zip(picks, parents, children, results)):
        child_id = state.new_id()
        flag = inherits_pollination(parent, kind)
        if not res.valid:
            runlog.event(_offspring_record(gen, "hillclimb", idx, child_id, parent, kind, res, None,
                                           "invalid", flag=flag, genome=genome, params=params))
            runlog.event({"type": "invalid", "generation": gen, "id": child_id, "reason": res.reason})
            continue
        state.saw(res.fitness)
        champion = state.archive[cell]
        accepted = res.fitness > champion.fitness
        if accepted:
            state.archive.put(Individual(child_id, parent.id, genome, params, res.fitness, cell, kind,
                                         flag, gen, res.descriptor))
        runlog.event(_offspring_record(gen, "hillclimb", idx, child_id, parent, kind, res, cell,
                                       "replace" if accepted else "rejected", False,
                                       champion.fitness if accepted else None, flag, genome, params))


def teacher_cells(archive: Archive, center: tuple, neighborhood: str = "von_neumann") -> list:
    """The centre cell followed by its occupied neighbours in a fixed order."""
    i, j = center
    if neighborhood == "moore":
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    else:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    cells = [tuple(center)]
    for di, dj in offsets:
        c = (i + di, j + dj)
        if c in archive:
            cells.append(c)
    return cells


def pollinates_at(gen: int, cfg: RunConfig) -> bool:
    return cfg.treatment.treatment == "pollination" and gen % cfg.pollination.frequency == 0


def passes_gate(teacher_fitness: float, distilled_fitness: float, tolerance: float) -> bool:
    return distilled_fitness >= teacher_fitness * (1.0 - tolerance)


def pollinate(state: RunState, evaluator: Evaluator, runlog: RunLog, gen: int) -> None:
    """Distil a controller from a neighbourhood of elites and offer it back to them."""
    cfg = state.cfg
    pc = cfg.pollination
    seed = cfg.treatment.master_seed
    occupied = state.archive.occupied()
    rng = rng_for(seed, POLLINATE, gen)
    center = occupied[rng.integers(len(occupied))]
    cells = teacher_cells(state.archive, center, pc.neighborhood)
    teachers = [state.archive[c] for c in cells]
    width, height = cfg.box
    pairs = [(morph.decode(t.genome, width, height), t.params) for t in teachers]
    dataset_seed = int(seed_for(seed, DATASET, gen).generate_state(1)[0])
    dataset = ctl.collect_dataset(pairs, pc.episodes_per_teacher, dataset_seed, cfg.task, cfg.noise)
    try:
        distilled, curve = ctl.distill(dataset, state.archive[center].params, cfg.distill,
                                       rng_for(seed, DISTILL, gen), cfg.task.actuation_range)
    except DegenerateDataset as exc:
        log.warning("generation %d: pollination skipped (%s)", gen, exc)
        runlog.event({"type": "pollination", "generation": gen, "center_cell": list(center),
                      "teacher_cells": [list(c) for c in cells], "teacher_ids": [t.id for t in teachers],
                      "n_teachers": len(teachers), "dataset_rows": len(dataset), "loss_curve": [],
                      "skipped": "degenerate_dataset",
                      "gates": [{"teacher_id": t.id, "cell": list(t.cell), "teacher_fitness": t.fitness,
                                 "distilled_fitness": None, "threshold": t.fitness * (1.0 - pc.tolerance),
                                 "accepted": False, "new_id": None} for t in teachers]})
        return
    results = evaluator.map([(t.genome, distilled, gen, k, cfg, POLL_EVAL) for k, t in enumerate(teachers)])
    gates = []
    for k, (teacher, res) in enumerate(zip(teachers, results)):
        accepted = res.valid and passes_gate(teacher.fitness, res.fitness, pc.tolerance)
        gate = {"teacher_id": teacher.id, "cell": list(teacher.cell), "teacher_fitness": teacher.fitness,
                "distilled_fitness": res.fitness,
                "threshold": teacher.fitness * (1.0 - pc.tolerance), "accepted": accepted, "new_id": None}
        if res.valid:
            state.saw(res.fitness)
        if accepted:
            new = Individual(state.new_id(), teacher.id, teacher.genome, distilled.copy(), res.fitness,
                             teacher.cell, "pollinated", True, gen, teacher.descriptor)
            state.archive.put(new)
            gate["new_id"] = new.id
            runlog.event({"type": "pollinated", "generation": gen, "id": new.id, "parent_id": teacher.id,
                          "cell": list(new.cell), "fitness": new.fitness, "parent_fitness": teacher.fitness,
                          "genome_sha": new.genome_sha(), "params_sha": new.params_sha()})
        gates.append(gate)
    runlog.event({"type": "pollination", "generation": gen, "center_cell": list(center),
                  "teacher_cells": [list(c) for c in cells], "teacher_ids": [t.id for t in teachers],
                  "n_teachers": len(teachers), "dataset_rows": len(dataset),
                  "loss_curve": [float(v) for v in curve], "gates": gates})


def _metrics_row(state: RunState, gen: int) -> dict:
    size, total, best_cell = qd_metrics(state.archive)
    return {"generation": gen, "collection_size": size, "total_quality": total,
            "maximal_quality": best_cell, "migrations_cum": state.migrations_cum,
            "best_fitness": 0.0 if state.best_fitness is None else state.best_fitness}


def save_checkpoint(state: RunState, runlog: RunLog, run_dir: Path) -> Path:
    ckpt = run_dir / "checkpoints" / f"gen_{state.generation}"
    if ckpt.exists():
        shutil.rmtree(ckpt)
    save_archive(state.archive, ckpt / "archive")
    events_off, metrics_off = runlog.offsets()
    info = {
        "generation": state.generation,
        "next_id": state.next_id,
        "hillclimb_cursor": state.hillclimb_cursor,
        "migrations_cum": state.migrations_cum,
        "best_fitness": state.best_fitness,
        "frozen_cells": None if state.frozen_cells is None else [list(c) for c in state.frozen_cells],
        "config_hash": state.cfg.hash(),
        "tool": state.cfg.header(),
        "events_offset": events_off,
        "metrics_offset": metrics_off,
    }
    (ckpt / "state.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    return ckpt


def load_checkpoint(ckpt, cfg: RunConfig) -> tuple:
    """Restore ``(state, info)``; raises ResumeMismatch on a config hash change."""
    ckpt = Path(ckpt)
    info = json.loads((ckpt / "state.json").read_text())
    if info["config_hash"] != cfg.hash():
        raise ResumeMismatch(f"checkpoint {ckpt} has config {info['config_hash']}, current is {cfg.hash()}")
    state = RunState(cfg, load_archive(ckpt / "archive"), info["generation"], info["next_id"],
                     info["hillclimb_cursor"], info["migrations_cum"], info["best_fitness"],
                     None if info["frozen_cells"] is None else [tuple(c) for c in info["frozen_cells"]])
    return state, info


def _prepare_resume(ckpt: Path, info: dict, run_dir: Path) -> None:
    src = ckpt.parent.parent
    for name, offset in (("events.jsonl", info["events_offset"]), ("metrics.csv", info["metrics_offset"])):
        data = (src / name).read_bytes()[:offset]
        if len(data) != offset:
            raise ResumeMismatch(f"{src / name} is shorter than the checkpoint offset")
        (run_dir / name).write_bytes(data)
    if src.resolve() != run_dir.resolve():
        dst = run_dir / "checkpoints" / ckpt.name
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(ckpt, dst)


@dataclass
class RunLogs:
    run_dir: Path
    events_path: Path
    metrics_path: Path
    final_checkpoint: Path
    state: RunState


def run_treatment(cfg: RunConfig, resume: Optional[str] = None, progress: Optional[Callable] = None) -> RunLogs:
    """Execute a whole run into ``cfg.out_dir``, optionally from a checkpoint."""
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.treatment
    if resume is not None:
        state, info = load_checkpoint(resume, cfg)
        _prepare_resume(Path(resume), info, run_dir)
        runlog = RunLog(run_dir, cfg, fresh=False)
    else:
        state = RunState(cfg, Archive(cfg.archive_dims, cfg.box[0] * cfg.box[1]))
        runlog = RunLog(run_dir, cfg, fresh=True)
    cfg.dump(run_dir / "config.json")
    last_ckpt = None
    with Evaluator(cfg.workers) as evaluator:
        try:
            if resume is None:
                bootstrap(state, evaluator, runlog)
            for gen in range(state.generation + 1, tc.generations + 1):
                if tc.treatment == "no_migration" and gen > tc.no_migration_after:
                    hillclimb_phase(state, evaluator, runlog, gen)
                else:
                    run_generation(state, evaluator, runlog, gen)
                if pollinates_at(gen, cfg):
                    pollinate(state, evaluator, runlog, gen)
                state.generation = gen
                runlog.metrics(_metrics_row(state, gen))
                if gen % cfg.checkpoint_interval == 0 or gen == tc.generations:
                    last_ckpt = save_checkpoint(state, runlog, run_dir)
                if progress is not None:
                    progress(gen, state)
        finally:
            runlog.close()
    if last_ckpt is None:
        last_ckpt = Path(resume) if resume else None
    return RunLogs(run_dir, runlog.events_path, runlog.metrics_path, last_ckpt, state)


@dataclass
class _Ghost:
    """Minimal stand-in for an Individual when rebuilding an archive from events."""

    id: int
    fitness: float
    cell: tuple
    pollinated_ancestor: bool
    genome_sha: str
    params_sha: str


def read_events(path) -> list:
    with open(path, "rb") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay(events: list, dims, box_cells: int) -> Archive:
    """Rebuild the archive from a run's event log alone.

    Raises ValueError if a logged insertion outcome disagrees with the replay.
    """
    archive = Archive(tuple(dims), box_cells)
    for ev in events:
        kind = ev["type"]
        if kind == "offspring" and ev["outcome"] != "invalid":
            ghost = _Ghost(ev["id"], ev["fitness"], tuple(ev["cell"]), ev["pollinated_ancestor"],
                           ev["genome_sha"], ev["params_sha"])
            if ev["phase"] == "hillclimb":
                if ev["outcome"] == "replace":
                    archive.put(ghost)
                continue
            parent_cell = None if ev["parent_cell"] is None else tuple(ev["parent_cell"])
            out = archive.try_insert(ghost, parent_cell, ev["generation"])
            if out.status != ev["outcome"]:
                raise ValueError(f"offspring {ev['id']}: logged {ev['outcome']}, replay gave {out.status}")
        elif kind == "pollinated":
            archive.put(_Ghost(ev["id"], ev["fitness"], tuple(ev["cell"]), True,
                               ev["genome_sha"], ev["params_sha"]))
    return archive
