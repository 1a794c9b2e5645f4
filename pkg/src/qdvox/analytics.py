"""Figure-backing series and statistics computed from run logs.

Everything here is a pure function of ``events.jsonl``, ``metrics.csv`` and
checkpointed archives, so re-running an analysis reproduces its CSVs byte
for byte.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archive import pooled_best, reliability
from .errors import BrokenLineage, CorruptLog

QD_METRICS = ("collection_size", "total_quality", "maximal_quality")
COMPARE_METRICS = QD_METRICS + ("reliability",)
POLLINATED = "pollinated_ancestor"
UNPOLLINATED = "no_pollinated_ancestor"


@dataclass(frozen=True)
class AnalysisConfig:
    window: int = 500
    ma_window: int = 100
    alpha: float = 0.05

    def __post_init__(self):
        if self.window < 1 or self.ma_window < 1:
            raise ValueError("windows must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D and of equal length")
        if self.x.size > 1 and not (np.diff(self.x) > 0).all():
            raise ValueError("x must be strictly increasing")

    def __len__(self) -> int:
        return self.x.size


# --------------------------------------------------------------------- loading

def load_events(path) -> list:
    """Parse an event log; a malformed or unterminated line raises CorruptLog."""
    path = Path(path)
    events = []
    with open(path, "rb") as fh:
        data = fh.read()
    lines = data.split(b"\n")
    trailing = lines.pop()  # empty when the file ends with a newline
    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            events.append(json.loads(raw))
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise CorruptLog(path, number, number - 1) from None
    if trailing.strip():
        raise CorruptLog(path, len(lines) + 1, len(lines))
    if not events or events[0].get("type") != "header":
        raise CorruptLog(path, 1, 0)
    return events


def load_metrics(path) -> dict:
    """Columns of a metrics CSV as arrays; comment lines are skipped."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise CorruptLog(path, 1, 0)
    head, body = rows[0], rows[1:]
    cols = {name: [] for name in head}
    for k, row in enumerate(body, start=2):
        if len(row) != len(head):
            raise CorruptLog(path, k, k - 1)
        try:
            for name, value in zip(head, row):
                cols[name].append(float(value))
        except ValueError:
            raise CorruptLog(path, k, k - 1) from None
    out = {name: np.array(v) for name, v in cols.items()}
    if "generation" in out:
        out["generation"] = out["generation"].astype(np.int64)
    return out


def header_of(events: list) -> str:
    return events[0]["tool"]


def final_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("gen_*"), key=lambda p: int(p.name[4:]))
    return ckpts[-1] if ckpts else None


def archive_grid(checkpoint) -> np.ndarray:
    """Fitness grid (NaN = empty) from a checkpoint without loading controllers."""
    index = json.loads((Path(checkpoint) / "archive" / "index.json").read_text())
    grid = np.full(tuple(index["dims"]), np.nan)
    for e in index["individuals"]:
        grid[tuple(e["cell"])] = e["fitness"]
    return grid


# ------------------------------------------------------------------ migrations

def migrations_per_window(events: list, window: int, generations: Optional[int] = None) -> Series:
    """Migration counts over consecutive windows of generations.

    Window ``k`` covers generations ``k*window+1 .. (k+1)*window`` and ``x``
    holds each window's last generation.
    """
    gens = [ev["generation"] for ev in events if ev.get("type") == "migration"]
    horizon = generations if generations is not None else (max(gens) if gens else 0)
    n = max(1, math.ceil(horizon / window))
    counts = np.zeros(n, dtype=np.int64)
    for g in gens:
        counts[min(n - 1, max(0, (g - 1) // window))] += 1
    return Series((np.arange(n) + 1) * window, counts, f"migrations per {window} generations")


# ----------------------------------------------------------- relative fitness

@dataclass
class RelativeFitness:
    groups: dict
    by_generation: dict
    excluded: int
    rows: list = field(default_factory=list)


def relative_fitness_split(events: list, kind: str, split_pollinated: bool = False) -> RelativeFitness:
    """Offspring/parent fitness ratios for valid offspring of one mutation kind.

    Rows whose parent fitness is not positive are dropped and counted in
    ``excluded``. With ``split_pollinated`` the ratios are grouped by whether
    the offspring has a pollinated ancestor.
    """
    if kind not in ("body", "brain"):
        raise ValueError("kind must be 'body' or 'brain'")
    grouped = defaultdict(list)
    per_gen = defaultdict(lambda: defaultdict(list))
    rows = []
    excluded = 0
    for ev in events:
        if ev.get("type") != "offspring" or ev["kind"] != kind or ev["outcome"] == "invalid":
            continue
        pf = ev["parent_fitness"]
        if pf is None or pf <= 0:
            excluded += 1
            continue
        ratio = ev["fitness"] / pf
        group = (POLLINATED if ev["pollinated_ancestor"] else UNPOLLINATED) if split_pollinated else "all"
        grouped[group].append(ratio)
        per_gen[group][ev["generation"]].append(ratio)
        rows.append((ev["generation"], group, ev["id"], ratio))
    groups = {g: np.array(v) for g, v in sorted(grouped.items())}
    by_gen = {}
    for g, table in sorted(per_gen.items()):
        xs = sorted(table)
        by_gen[g] = Series(xs, [math.fsum(table[x]) / len(table[x]) for x in xs], f"{kind} {g}")
    return RelativeFitness(groups, by_gen, excluded, rows)


def moving_average(series: Series, w: int) -> Series:
    """Trailing mean over the last ``min(w, i + 1)`` points."""
    if w < 1:
        raise ValueError("w must be >= 1")
    y = series.y
    out = np.empty_like(y)
    for i in range(y.size):
        out[i] = y[max(0, i - w + 1):i + 1].mean()
    return Series(series.x.copy(), out, f"{series.label} (moving average {w})".strip())


def mean_band(rows: Sequence[np.ndarray]) -> tuple:
    """Mean and a normal-approximation 95 % band (mean ± 1.96 SEM) across runs."""
    stack = np.vstack([np.asarray(r, dtype=float) for r in rows])
    mean = stack.mean(axis=0)
    if stack.shape[0] < 2:
        return mean, mean.copy(), mean.copy()
    sem = stack.std(axis=0, ddof=1) / math.sqrt(stack.shape[0])
    return mean, mean - 1.96 * sem, mean + 1.96 * sem


# ------------------------------------------------------------------ statistics

def _ranks(values: np.ndarray) -> np.ndarray:
    """Mid-ranks, 1-based."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_counts(n: int, m: int) -> list:
    """Number of arrangements giving each U value for sample sizes n, m."""
    # f[j][u]: arrangements of n' = current row and j second-sample items
    prev = [[1] for _ in range(m + 1)]  # n' = 0: only U = 0
    for i in range(1, n + 1):
        cur = [[1]]  # j = 0: only U = 0
        for j in range(1, m + 1):
            size = i * j + 1
            row = [0] * size
            # the largest item is from the first sample (adds j) or the second
            for u, c in enumerate(prev[j]):
                row[u + j] += c
            for u, c in enumerate(cur[j - 1]):
                row[u] += c
            cur.append(row)
        prev = cur
    return prev[m]


def wilcoxon_rank_sum(a, b) -> tuple:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test; returns ``(U, p)``.

    ``U`` is the first sample's rank sum minus ``n(n+1)/2``. The p value is
    exact when ``n + m <= 20`` and there are no ties, and otherwise comes from
    the normal approximation with tie and continuity corrections. If every
    value is identical, p is 1.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _ranks(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2)
    if np.all(pooled == pooled[0]):
        return u, 1.0
    _, tie_sizes = np.unique(pooled, return_counts=True)
    ties = bool((tie_sizes > 1).any())
    if n + m <= 20 and not ties:
        counts = _u_counts(n, m)
        total = math.comb(n + m, n)
        k = int(round(u))
        lower = Fraction(sum(counts[:k + 1]), total)
        upper = Fraction(sum(counts[k:]), total)
        return u, float(min(Fraction(1), 2 * min(lower, upper)))
    big_n = n + m
    tie_term = float(((tie_sizes ** 3) - tie_sizes).sum()) / (big_n * (big_n - 1))
    var = n * m / 12.0 * ((big_n + 1) - tie_term)
    mu = n * m / 2.0
    z = max(0.0, abs(u - mu) - 0.5) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


@dataclass
class Verdict:
    metric: str
    u: float
    p: float
    significant: bool
    mean_a: float
    mean_b: float

    @property
    def marker(self) -> str:
        return "*" if self.significant else "n.s."


def compare_runs(group_a: Sequence[dict], group_b: Sequence[dict], alpha: float = 0.05,
                 metrics: Sequence[str] = COMPARE_METRICS) -> list:
    """One rank-sum verdict per metric; each group is a list of per-run summaries."""
    if len(group_a) < 2 or len(group_b) < 2:
        raise ValueError("each group needs at least 2 runs")
    out = []
    for metric in metrics:
        xa = [float(r[metric]) for r in group_a]
        xb = [float(r[metric]) for r in group_b]
        u, p = wilcoxon_rank_sum(xa, xb)
        out.append(Verdict(metric, u, p, p < alpha, float(np.mean(xa)), float(np.mean(xb))))
    return out


def format_verdicts(verdicts: Sequence[Verdict], header: str = "") -> str:
    lines = [f"# {header}"] if header else []
    lines.append(f"{'metric':<16} {'mean_a':>12} {'mean_b':>12} {'U':>8} {'p':>8}  sig")
    for v in verdicts:
        lines.append(f"{v.metric:<16} {v.mean_a:>12.4f} {v.mean_b:>12.4f} {v.u:>8.1f} {v.p:>8.4f}  {v.marker}")
    return "\n".join(lines) + "\n"


def run_summaries(run_dirs: Sequence) -> list:
    """Final QD metrics of each run plus reliability against the pooled best grid."""
    finals, grids = [], []
    for d in run_dirs:
        metrics = load_metrics(Path(d) / "metrics.csv")
        if metrics["generation"].size == 0:
            raise CorruptLog(Path(d) / "metrics.csv", 2, 1)
        finals.append({k: float(metrics[k][-1]) for k in QD_METRICS})
        ckpt = final_checkpoint(d)
        if ckpt is None:
            raise FileNotFoundError(f"{d}: no checkpoints")
        grids.append(archive_grid(ckpt))
    rel = reliability(grids, pooled_best(grids))
    for row, r in zip(finals, rel):
        row["reliability"] = r
    return finals


# --------------------------------------------------------------------- lineage

@dataclass(frozen=True)
class LineageStep:
    id: int
    cell: tuple
    fitness: float
    generation: int
    is_migration: bool
    kind: str


def _nodes(events: list) -> dict:
    nodes = {}
    for ev in events:
        if ev.get("type") == "offspring" and ev["outcome"] != "invalid":
            nodes[ev["id"]] = ev
        elif ev.get("type") == "pollinated":
            nodes[ev["id"]] = {**ev, "kind": "pollinated", "pollinated_ancestor": True}
    return nodes


def champion_lineage(events: list, final_archive=None) -> list:
    """Ancestry of the run champion ordered from seed to champion.

    The champion is the best occupant of ``final_archive`` when given (ties
    go to the lower id), else the best accepted individual in the log. A step
    is a migration when its cell differs from its parent's cell.
    """
    nodes = _nodes(events)
    if final_archive is not None:
        best = final_archive.best()
        if best is None:
            return []
        champion = best.id
    else:
        accepted = [e for e in nodes.values() if e.get("outcome", "new") != "rejected"]
        if not accepted:
            return []
        champion = max(accepted, key=lambda e: (e["fitness"], -e["id"]))["id"]
    chain = []
    seen = set()
    current = champion
    while current is not None:
        if current in seen:
            raise BrokenLineage(f"cycle through individual {current}")
        seen.add(current)
        node = nodes.get(current)
        if node is None:
            raise BrokenLineage(f"individual {current} is missing from the log")
        chain.append(node)
        current = node["parent_id"]
    chain.reverse()
    steps = []
    for k, node in enumerate(chain):
        moved = k > 0 and tuple(node["cell"]) != tuple(chain[k - 1]["cell"])
        steps.append(LineageStep(node["id"], tuple(node["cell"]), node["fitness"], node["generation"],
                                 moved, node["kind"]))
    return steps


def migration_fitness_fractions(lineage: Sequence[LineageStep]) -> list:
    """Fitness at each migration step divided by the champion's fitness."""
    if not lineage or lineage[-1].fitness == 0:
        return []
    return [s.fitness / lineage[-1].fitness for s in lineage if s.is_migration]


def pollination_mismatches(events: list) -> list:
    """Ids whose logged ``pollinated_ancestor`` flag disagrees with graph reachability.

    Every logged individual (including rejected and invalid offspring) is
    checked: the flag must be true exactly when the individual or one of its
    ancestors was created by pollination.
    """
    parents, kind, flag = {}, {}, {}
    for ev in events:
        if ev.get("type") == "offspring":
            parents[ev["id"]], kind[ev["id"]], flag[ev["id"]] = ev["parent_id"], ev["kind"], ev["pollinated_ancestor"]
        elif ev.get("type") == "pollinated":
            parents[ev["id"]], kind[ev["id"]], flag[ev["id"]] = ev["parent_id"], "pollinated", True
    memo = {}

    def reach(i):
        trail = []
        while i is not None and i not in memo:
            if i not in parents:
                raise BrokenLineage(f"individual {i} is missing from the log")
            if kind[i] == "pollinated":
                memo[i] = True
                break
            trail.append(i)
            i = parents[i]
        value = memo.get(i, False) if i is not None else False
        for t in trail:
            memo[t] = value
        return value

    return sorted(i for i in flag if reach(i) != flag[i])


# ------------------------------------------------------------------- writers

def _write_csv(path: Path, header: str, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def analyze_run(run_dir, out_dir, cfg: Optional[AnalysisConfig] = None) -> list:
    """Write the per-run analysis CSVs and return their paths."""
    cfg = cfg or AnalysisConfig()
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    events = load_events(run_dir / "events.jsonl")
    metrics = load_metrics(run_dir / "metrics.csv")
    head = header_of(events)
    generations = int(metrics["generation"][-1]) if metrics["generation"].size else None
    written = []

    mig = migrations_per_window(events, cfg.window, generations)
    path = out_dir / "fig1_migrations.csv"
    _write_csv(path, head, ["window_end", "migrations"], zip(mig.x.tolist(), mig.y.tolist()))
    written.append(path)

    path = out_dir / "fig1_qd.csv"
    _write_csv(path, head, ["generation", *QD_METRICS, "migrations_cum"],
               zip(metrics["generation"].tolist(), *(metrics[k].tolist() for k in QD_METRICS),
                   metrics["migrations_cum"].tolist()))
    written.append(path)

    rel_rows = []
    ma_rows = []
    for kind in ("body", "brain"):
        split = relative_fitness_split(events, kind, split_pollinated=True)
        rel_rows.extend((kind, g, gen, i, r) for gen, g, i, r in split.rows)
        for group, series in split.by_generation.items():
            smooth = moving_average(series, cfg.ma_window)
            ma_rows.extend((kind, group, x, y, s) for x, y, s in
                           zip(series.x.tolist(), series.y.tolist(), smooth.y.tolist()))
    path = out_dir / "fig4_relfit.csv"
    _write_csv(path, head, ["kind", "group", "generation", "offspring_id", "relative_fitness"], rel_rows)
    written.append(path)
    path = out_dir / "fig8_relfit_ma.csv"
    _write_csv(path, head, ["kind", "group", "generation", "mean_relative_fitness",
                            f"moving_average_{cfg.ma_window}"], ma_rows)
    written.append(path)

    loss_rows = [(ev["generation"], epoch, float(v)) for ev in events if ev.get("type") == "pollination"
                 for epoch, v in enumerate(ev["loss_curve"])]
    path = out_dir / "distill_loss.csv"
    _write_csv(path, head, ["generation", "epoch", "mse"], loss_rows)
    written.append(path)

    ckpt = final_checkpoint(run_dir)
    lineage = champion_lineage(events) if ckpt is None else champion_lineage(
        events, _GridArchive(ckpt))
    path = out_dir / "lineage.csv"
    champ = lineage[-1].fitness if lineage else 0.0
    _write_csv(path, head, ["id", "cell_i", "cell_j", "fitness", "generation", "kind", "is_migration",
                            "fraction_of_champion"],
               [(s.id, s.cell[0], s.cell[1], s.fitness, s.generation, s.kind, int(s.is_migration),
                 s.fitness / champ if champ else 0.0) for s in lineage])
    written.append(path)

    if ckpt is not None:
        grid = archive_grid(ckpt)
        path = out_dir / "archive_grid.csv"
        _write_csv(path, head, ["i", "j", "fitness"],
                   [(i, j, "" if math.isnan(grid[i, j]) else float(grid[i, j]))
                    for i in range(grid.shape[0]) for j in range(grid.shape[1])])
        written.append(path)
    return written


class _GridArchive:
    """Just enough of an archive to name the champion of a checkpoint."""

    def __init__(self, checkpoint):
        index = json.loads((Path(checkpoint) / "archive" / "index.json").read_text())
        self._best = max(index["individuals"], key=lambda e: (e["fitness"], -e["id"]), default=None)

    def best(self):
        if self._best is None:
            return None
        return _Ref(self._best["id"])


@dataclass(frozen=True)
class _Ref:
    id: int


def analyze_runs(run_dirs: Sequence, out_dir, cfg: Optional[AnalysisConfig] = None) -> list:
    """Per-run CSVs under ``out_dir/<run name>/`` plus aggregate series across runs."""
    cfg = cfg or AnalysisConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _unique_names(run_dirs)
    written = []
    heads, metric_runs, mig_runs = [], [], []
    for name, d in zip(names, run_dirs):
        written += analyze_run(d, out_dir / name, cfg)
        events = load_events(Path(d) / "events.jsonl")
        heads.append(header_of(events).split("config=")[-1])
        metrics = load_metrics(Path(d) / "metrics.csv")
        metric_runs.append(metrics)
        mig_runs.append(migrations_per_window(events, cfg.window, int(metrics["generation"][-1])))
    head = f"qdvox analysis runs={','.join(heads)}"

    n = min(m["generation"].size for m in metric_runs)
    gens = metric_runs[0]["generation"][:n].tolist()
    rows = []
    for metric in QD_METRICS + ("migrations_cum",):
        mean, lo, hi = mean_band([m[metric][:n] for m in metric_runs])
        rows.extend((metric, g, float(a), float(b), float(c)) for g, a, b, c in zip(gens, mean, lo, hi))
    path = out_dir / "aggregate_metrics.csv"
    _write_csv(path, head, ["metric", "generation", "mean", "band_lo", "band_hi"], rows)
    written.append(path)

    k = min(len(s) for s in mig_runs)
    mean, lo, hi = mean_band([s.y[:k] for s in mig_runs])
    path = out_dir / "aggregate_migrations.csv"
    _write_csv(path, head, ["window_end", "mean", "band_lo", "band_hi"],
               zip(mig_runs[0].x[:k].tolist(), mean.tolist(), lo.tolist(), hi.tolist()))
    written.append(path)
    return written


def _unique_names(run_dirs: Sequence) -> list:
    names, seen = [], defaultdict(int)
    for d in run_dirs:
        base = Path(d).resolve().name or "run"
        seen[base] += 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names
