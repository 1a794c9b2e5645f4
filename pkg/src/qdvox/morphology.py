"""CPPN genomes, decoding into voxel grids, and structural mutation.

Node ids 0-3 are the fixed inputs (x, y, d, bias) and ids 4-8 the five output
channels, indexed like the material ids. Hidden nodes get ids from 9 upward.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import materials as mat
from .errors import EmptyMorphology

ACTIVATIONS = ("sine", "abs", "square", "sqrt", "identity")
INPUT_IDS = (0, 1, 2, 3)
OUTPUT_IDS = (4, 5, 6, 7, 8)
FIRST_HIDDEN_ID = 9

WEIGHT_SIGMA = 0.5
WEIGHT_LIMIT = 3.0
# node values are clipped so deep chains of squares stay finite
VALUE_LIMIT = 1e6

EDITS = ("add_node", "remove_node", "add_link", "remove_link", "change_activation", "perturb_weight")


@dataclass(frozen=True)
class Node:
    id: int
    activation: str = "identity"
    bias: float = 0.0


@dataclass(frozen=True)
class Link:
    src: int
    dst: int
    weight: float
    enabled: bool = True


@dataclass(frozen=True)
class CppnGenome:
    """Output and hidden nodes plus weighted links; inputs are implicit."""

    nodes: tuple
    links: tuple

    @property
    def hidden_ids(self) -> list:
        return [n.id for n in self.nodes if n.id >= FIRST_HIDDEN_ID]

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": n.id, "activation": n.activation, "bias": n.bias} for n in self.nodes],
            "links": [{"src": l.src, "dst": l.dst, "weight": l.weight, "enabled": l.enabled}
                      for l in self.links],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "CppnGenome":
        nodes = tuple(Node(int(n["id"]), n["activation"], float(n["bias"])) for n in data["nodes"])
        links = tuple(Link(int(l["src"]), int(l["dst"]), float(l["weight"]), bool(l["enabled"]))
                      for l in data["links"])
        return cls(nodes, links)

    @classmethod
    def from_json(cls, text: str) -> "CppnGenome":
        return cls.from_dict(json.loads(text))


def validate_genome(genome: CppnGenome) -> None:
    """Raise ``ValueError`` unless the genome satisfies its structural invariants."""
    ids = [n.id for n in genome.nodes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate node ids")
    if sorted(i for i in ids if i < FIRST_HIDDEN_ID) != list(OUTPUT_IDS):
        raise ValueError("genome must hold exactly the 5 output nodes")
    for n in genome.nodes:
        if n.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {n.activation!r}")
    known = set(ids) | set(INPUT_IDS)
    pairs = set()
    for l in genome.links:
        if l.src not in known or l.dst not in known:
            raise ValueError(f"link {l.src}->{l.dst} references a missing node")
        if l.dst in INPUT_IDS or l.src in OUTPUT_IDS:
            raise ValueError(f"link {l.src}->{l.dst} points into an input or out of an output")
        if (l.src, l.dst) in pairs:
            raise ValueError(f"duplicate link {l.src}->{l.dst}")
        pairs.add((l.src, l.dst))
        if not np.isfinite(l.weight):
            raise ValueError("non-finite weight")
    for l in genome.links:
        if _reaches(genome, l.dst, l.src):
            raise ValueError("genome graph has a cycle")


def topological_order(genome: CppnGenome) -> list:
    """Evaluation order of non-input nodes; raises ``ValueError`` on a cycle."""
    ids = [n.id for n in genome.nodes]
    indeg = {i: 0 for i in ids}
    out: dict = {i: [] for i in list(INPUT_IDS) + ids}
    for l in genome.links:
        if l.enabled:
            out[l.src].append(l.dst)
            if l.src not in INPUT_IDS:
                indeg[l.dst] += 1
    queue = deque(sorted(i for i in ids if indeg[i] == 0))
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in sorted(out[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if len(order) != len(ids):
        raise ValueError("genome graph has a cycle")
    return order


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sine":
        return np.sin(z)
    if name == "abs":
        return np.abs(z)
    if name == "square":
        return z * z
    if name == "sqrt":
        return np.sqrt(np.abs(z))
    return z


def cell_inputs(width: int, height: int) -> np.ndarray:
    """(x, y, d, bias) for every cell, row-major, shape (H*W, 4).

    x and y span [-1, 1] (y = 1 on the top row); d is the distance to the
    centre divided by its maximum sqrt(2).
    """
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(1.0, -1.0, height) if height > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    d = np.sqrt(xx ** 2 + yy ** 2) / np.sqrt(2.0)
    return np.stack([xx.ravel(), yy.ravel(), d.ravel(), np.ones(xx.size)], axis=1)


def evaluate(genome: CppnGenome, inputs: np.ndarray) -> np.ndarray:
    """Network outputs for a batch of input rows, shape (rows, 5)."""
    values = {i: inputs[:, k] for k, i in enumerate(INPUT_IDS)}
    incoming: dict = {n.id: [] for n in genome.nodes}
    for l in genome.links:
        if l.enabled:
            incoming[l.dst].append(l)
    for node_id in topological_order(genome):
        node = genome.node(node_id)
        z = np.full(inputs.shape[0], node.bias)
        for l in incoming[node_id]:
            z = z + l.weight * values[l.src]
        values[node_id] = np.clip(_activate(node.activation, z), -VALUE_LIMIT, VALUE_LIMIT)
    return np.stack([values[i] for i in OUTPUT_IDS], axis=1)


@dataclass(frozen=True)
class Morphology:
    """A decoded, single-component voxel grid (row 0 on top)."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.int64)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def descriptor(self) -> tuple:
        return descriptor(self)

    def to_text(self) -> str:
        return "\n".join("".join(mat.CHARS[v] for v in row) for row in self.grid) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Morphology":
        rows = [r for r in text.strip().splitlines() if r]
        return cls(np.array([[mat.CHARS.index(ch) for ch in r] for r in rows]))

    def __eq__(self, other):
        return isinstance(other, Morphology) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash(self.grid.tobytes())


def descriptor(morphology) -> tuple:
    """(total voxels, active voxels)."""
    grid = np.asarray(getattr(morphology, "grid", morphology))
    total = int(np.count_nonzero(grid != mat.EMPTY))
    active = int(np.count_nonzero((grid == mat.ACTIVE_H) | (grid == mat.ACTIVE_V)))
    return total, active


def largest_component(grid: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected patch of non-empty cells.

    Ties go to the patch holding the first cell in row-major order.
    """
    grid = np.asarray(grid)
    height, width = grid.shape
    seen = np.zeros(grid.shape, dtype=bool)
    best: list = []
    for r in range(height):
        for c in range(width):
            if grid[r, c] == mat.EMPTY or seen[r, c]:
                continue
            patch = []
            seen[r, c] = True
            queue = deque([(r, c)])
            while queue:
                pr, pc = queue.popleft()
                patch.append((pr, pc))
                for nr, nc in ((pr - 1, pc), (pr + 1, pc), (pr, pc - 1), (pr, pc + 1)):
                    if 0 <= nr < height and 0 <= nc < width and not seen[nr, nc] and grid[nr, nc] != mat.EMPTY:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            if len(patch) > len(best):
                best = patch
    out = np.zeros_like(grid)
    for r, c in best:
        out[r, c] = grid[r, c]
    return out


def decode(genome: CppnGenome, width: int, height: int) -> Morphology:
    """Paint a W x H grid by per-cell argmax over the five output channels."""
    outputs = evaluate(genome, cell_inputs(width, height))
    # np.argmax returns the first maximum, i.e. the lowest channel on ties
    grid = np.argmax(outputs, axis=1).reshape(height, width)
    grid = largest_component(grid)
    if not grid.any():
        raise EmptyMorphology("all cells decoded to empty")
    return Morphology(grid)


def initial_genome(rng: np.random.Generator, n_mutations: int = 2) -> CppnGenome:
    """Inputs fully connected to outputs with random weights, then a few edits."""
    nodes = tuple(Node(i, "identity", 0.0) for i in OUTPUT_IDS)
    links = tuple(Link(s, d, _draw_weight(rng)) for s in INPUT_IDS for d in OUTPUT_IDS)
    genome = CppnGenome(nodes, links)
    for _ in range(n_mutations):
        genome = mutate(genome, rng)
    return genome


def _draw_weight(rng: np.random.Generator, base: float = 0.0) -> float:
    return float(np.clip(base + rng.normal(0.0, WEIGHT_SIGMA), -WEIGHT_LIMIT, WEIGHT_LIMIT))


def _reaches(genome: CppnGenome, start: int, goal: int) -> bool:
    out: dict = {}
    for l in genome.links:
        out.setdefault(l.src, []).append(l.dst)
    stack, seen = [start], {start}
    while stack:
        i = stack.pop()
        if i == goal:
            return True
        for j in out.get(i, ()):
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return False


def _add_link_candidates(genome: CppnGenome) -> list:
    existing = {(l.src, l.dst): l for l in genome.links}
    hidden = genome.hidden_ids
    cands = []
    for s in list(INPUT_IDS) + hidden:
        for d in hidden + list(OUTPUT_IDS):
            if s == d:
                continue
            link = existing.get((s, d))
            if link is not None and link.enabled:
                continue
            # disabled links count too, so re-enabling can never close a cycle
            if _reaches(genome, d, s):
                continue
            cands.append((s, d))
    return cands


def applicable_edits(genome: CppnGenome) -> list:
    enabled = [l for l in genome.links if l.enabled]
    edits = []
    if enabled:
        edits.append("add_node")
    if genome.hidden_ids:
        edits.append("remove_node")
    if _add_link_candidates(genome):
        edits.append("add_link")
    if enabled:
        edits.append("remove_link")
    edits.append("change_activation")
    if enabled:
        edits.append("perturb_weight")
    return edits


def apply_edit(genome: CppnGenome, edit: str, rng: np.random.Generator) -> CppnGenome:
    """Apply one named structural edit. Raises ``ValueError`` if inapplicable."""
    links = list(genome.links)
    enabled_idx = [i for i, l in enumerate(links) if l.enabled]
    if edit == "add_node":
        if not enabled_idx:
            raise ValueError("no link to split")
        i = enabled_idx[rng.integers(len(enabled_idx))]
        old = links[i]
        new_id = max([FIRST_HIDDEN_ID - 1] + genome.hidden_ids) + 1
        act = ACTIVATIONS[rng.integers(len(ACTIVATIONS))]
        links[i] = replace(old, enabled=False)
        links += [Link(old.src, new_id, 1.0), Link(new_id, old.dst, old.weight)]
        return CppnGenome(genome.nodes + (Node(new_id, act, 0.0),), tuple(links))
    if edit == "remove_node":
        hidden = genome.hidden_ids
        if not hidden:
            raise ValueError("no hidden node")
        victim = hidden[rng.integers(len(hidden))]
        return CppnGenome(
            tuple(n for n in genome.nodes if n.id != victim),
            tuple(l for l in links if victim not in (l.src, l.dst)),
        )
    if edit == "add_link":
        cands = _add_link_candidates(genome)
        if not cands:
            raise ValueError("no addable link")
        s, d = cands[rng.integers(len(cands))]
        w = _draw_weight(rng)
        for i, l in enumerate(links):
            if (l.src, l.dst) == (s, d):
                links[i] = Link(s, d, w, True)
                return CppnGenome(genome.nodes, tuple(links))
        return CppnGenome(genome.nodes, tuple(links) + (Link(s, d, w),))
    if edit == "remove_link":
        if not enabled_idx:
            raise ValueError("no link to remove")
        i = enabled_idx[rng.integers(len(enabled_idx))]
        del links[i]
        return CppnGenome(genome.nodes, tuple(links))
    if edit == "change_activation":
        nodes = list(genome.nodes)
        k = int(rng.integers(len(nodes)))
        choices = [a for a in ACTIVATIONS if a != nodes[k].activation]
        nodes[k] = replace(nodes[k], activation=choices[rng.integers(len(choices))])
        return CppnGenome(tuple(nodes), genome.links)
    if edit == "perturb_weight":
        if not enabled_idx:
            raise ValueError("no link to perturb")
        i = enabled_idx[rng.integers(len(enabled_idx))]
        links[i] = replace(links[i], weight=_draw_weight(rng, links[i].weight))
        return CppnGenome(genome.nodes, tuple(links))
    raise ValueError(f"unknown edit {edit!r}")


def mutate(genome: CppnGenome, rng: np.random.Generator, edit: Optional[str] = None) -> CppnGenome:
    """Apply exactly one structural edit drawn uniformly.

    An inapplicable draw is replaced by a uniform draw over the applicable
    edits. ``edit`` forces the first draw (used by tests).
    """
    if edit is None:
        edit = EDITS[rng.integers(len(EDITS))]
    usable = applicable_edits(genome)
    if edit not in usable:
        edit = usable[rng.integers(len(usable))]
    return apply_edit(genome, edit, rng)
