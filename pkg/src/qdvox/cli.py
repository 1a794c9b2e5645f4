"""``qdvox`` command line: run, analyze, plot, compare, champion-dump.

Exit codes: 0 ok, 2 configuration error, 3 resume mismatch, 4 bad or missing data.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_RESUME, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("qdvox")


def _default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _fail(msg: str, code: int) -> int:
    print(f"qdvox: error: {msg}", file=sys.stderr)
    return code


# ------------------------------------------------------------------------ run

def build_config(args):
    """Config file (or defaults) with command-line overrides applied on top."""
    from .config import RunConfig

    base = None
    if args.config:
        base = RunConfig.load(args.config)
    elif args.resume:
        saved = Path(args.resume).parent.parent / "config.json"
        if saved.exists():
            base = RunConfig.load(saved)
    cfg = base or RunConfig()
    treatment = {}
    if args.seed is not None:
        treatment["master_seed"] = args.seed
    if args.treatment is not None:
        treatment["treatment"] = args.treatment
    if args.generations is not None:
        treatment["generations"] = args.generations
    if args.no_migration_after is not None:
        treatment["no_migration_after"] = args.no_migration_after
    if treatment:
        cfg = cfg.override("treatment", **treatment)
    top = {}
    if args.out is not None:
        top["out_dir"] = args.out
    elif args.resume and base is not None and not args.config:
        top["out_dir"] = str(Path(args.resume).parent.parent)
    if args.workers is not None:
        top["workers"] = args.workers
    elif base is None:
        top["workers"] = _default_workers()
    if args.checkpoint_interval is not None:
        top["checkpoint_interval"] = args.checkpoint_interval
    if top:
        cfg = cfg.replace(**top)
    return cfg


def cmd_run(args) -> int:
    from .errors import ConfigError, ResumeMismatch
    from .evolve import run_treatment

    try:
        cfg = build_config(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except (TypeError, ValueError) as exc:
        return _fail(f"invalid configuration: {exc}", EXIT_CONFIG)
    if args.resume and not (Path(args.resume) / "state.json").exists():
        return _fail(f"no checkpoint at {args.resume}", EXIT_RESUME)

    def progress(gen, state):
        if gen % 10 == 0 or gen == cfg.treatment.generations:
            log.info("gen %d: %d cells, best %.4f, migrations %d", gen, len(state.archive),
                     state.best_fitness or 0.0, state.migrations_cum)

    try:
        result = run_treatment(cfg, resume=args.resume, progress=progress)
    except ResumeMismatch as exc:
        return _fail(str(exc), EXIT_RESUME)
    print(f"run complete: {result.run_dir} ({cfg.header()})")
    return EXIT_OK


# -------------------------------------------------------------------- analyze

def cmd_analyze(args) -> int:
    from .analytics import AnalysisConfig, analyze_runs
    from .errors import CorruptLog

    try:
        cfg = AnalysisConfig(window=args.window, ma_window=args.ma_window)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    for d in args.run_dirs:
        for name in ("events.jsonl", "metrics.csv"):
            if not (Path(d) / name).exists():
                return _fail(f"{Path(d) / name} not found", EXIT_DATA)
    try:
        written = analyze_runs(args.run_dirs, args.out, cfg)
    except CorruptLog as exc:
        return _fail(str(exc), EXIT_DATA)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------- plot

def _read_table(path: Path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    header = next(iter(lines), "")
    return list(csv.DictReader(io.StringIO("".join(lines)))) if header else []


def _header_line(path: Path) -> str:
    with open(path) as fh:
        first = fh.readline()
    return first[1:].strip() if first.startswith("#") else f"qdvox {__version__}"


def _save_svg(fig, path: Path, header: str) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": f"qdvox {__version__}"})
    text = buf.getvalue()
    decl, sep, rest = text.partition("\n")
    if decl.startswith("<?xml"):
        text = f"{decl}\n<!-- {header} -->\n{rest}"
    else:
        text = f"<!-- {header} -->\n{text}"
    path.write_text(text)


def _no_data(ax) -> None:
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)


def plot_lines(ax, rows, x_key, groups, label_key=None):
    """Draw mean lines with shaded bands; returns False when nothing was drawn."""
    drawn = False
    for group in groups:
        sel = [r for r in rows if label_key is None or r[label_key] == group]
        if not sel:
            continue
        x = [float(r[x_key]) for r in sel]
        ax.plot(x, [float(r["mean"]) for r in sel], label=group)
        ax.fill_between(x, [float(r["band_lo"]) for r in sel], [float(r["band_hi"]) for r in sel], alpha=0.25)
        drawn = True
    return drawn


def plot_heatmap(ax, rows, dims=None):
    """One Rectangle patch per archive cell with gid ``cell-i-j``."""
    import matplotlib.colors as mcolors
    from matplotlib.patches import Rectangle

    cells = {(int(r["i"]), int(r["j"])): (float(r["fitness"]) if r["fitness"] != "" else None) for r in rows}
    if dims is None:
        dims = (max((i for i, _ in cells), default=-1) + 1, max((j for _, j in cells), default=-1) + 1)
    values = [v for v in cells.values() if v is not None]
    norm = mcolors.Normalize(min(values, default=0.0), max(values, default=1.0) or 1.0)
    cmap = mcolors.LinearSegmentedColormap.from_list("qd", ["#f7fbff", "#08306b"])
    for i in range(dims[0]):
        for j in range(dims[1]):
            v = cells.get((i, j))
            face = "#dddddd" if v is None else cmap(norm(v))
            ax.add_patch(Rectangle((i, j), 1, 1, facecolor=face, edgecolor="white", gid=f"cell-{i}-{j}"))
    ax.set_xlim(0, dims[0])
    ax.set_ylim(0, dims[1])
    ax.set_aspect("equal")
    ax.set_xlabel("total voxels bin")
    ax.set_ylabel("active voxels bin")
    if not values:
        _no_data(ax)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "qdvox"
    adir = Path(args.analysis_dir)
    agg = adir / "aggregate_metrics.csv"
    mig = adir / "aggregate_migrations.csv"
    for p in (agg, mig):
        if not p.exists():
            return _fail(f"{p} not found (run 'qdvox analyze' first)", EXIT_DATA)
    out = Path(args.out) if args.out else adir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    header = _header_line(agg)
    made = []

    rows = _read_table(agg)
    metrics = ("collection_size", "total_quality", "maximal_quality")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, metric in zip(axes, metrics):
        sel = [r for r in rows if r["metric"] == metric]
        if not plot_lines(ax, sel, "generation", [metric]):
            _no_data(ax)
        ax.set_title(metric.replace("_", " "))
        ax.set_xlabel("generation")
    fig.tight_layout()
    _save_svg(fig, out / "qd_metrics.svg", header)
    plt.close(fig)
    made.append("qd_metrics.svg")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if not plot_lines(ax, _read_table(mig), "window_end", ["migrations"]):
        _no_data(ax)
    ax.set_xlabel("generation")
    ax.set_ylabel("migrations per window")
    fig.tight_layout()
    _save_svg(fig, out / "migrations.svg", header)
    plt.close(fig)
    made.append("migrations.svg")

    for run in sorted(p for p in adir.iterdir() if p.is_dir() and (p / "fig1_migrations.csv").exists()):
        required = [run / n for n in ("fig4_relfit.csv", "fig8_relfit_ma.csv")]
        missing = [p for p in required if not p.exists()]
        if missing:
            return _fail(f"{missing[0]} not found", EXIT_DATA)
        run_header = _header_line(run / "fig1_migrations.csv")

        rel = _read_table(run / "fig4_relfit.csv")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        labels, data = [], []
        for kind in ("body", "brain"):
            for group in ("no_pollinated_ancestor", "pollinated_ancestor"):
                vals = [float(r["relative_fitness"]) for r in rel if r["kind"] == kind and r["group"] == group]
                if vals:
                    labels.append(f"{kind}\n{group.replace('_', ' ')}")
                    data.append(vals)
        if data:
            key = "tick_labels" if tuple(int(v) for v in matplotlib.__version__.split(".")[:2]) >= (3, 9) else "labels"
            ax.boxplot(data, **{key: labels})
        else:
            _no_data(ax)
        ax.set_ylabel("offspring / parent fitness")
        fig.tight_layout()
        _save_svg(fig, out / f"{run.name}_relfit_box.svg", run_header)
        plt.close(fig)

        ma = _read_table(run / "fig8_relfit_ma.csv")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        col = next((k for k in (ma[0] if ma else {}) if k.startswith("moving_average")), None)
        drawn = False
        for kind in ("body", "brain"):
            for group in ("no_pollinated_ancestor", "pollinated_ancestor"):
                sel = [r for r in ma if r["kind"] == kind and r["group"] == group]
                if sel and col:
                    ax.plot([int(r["generation"]) for r in sel], [float(r[col]) for r in sel],
                            label=f"{kind}, {group.replace('_', ' ')}")
                    drawn = True
        if drawn:
            ax.legend(fontsize=7)
        else:
            _no_data(ax)
        ax.set_xlabel("generation")
        ax.set_ylabel("relative fitness")
        fig.tight_layout()
        _save_svg(fig, out / f"{run.name}_relfit_ma.svg", run_header)
        plt.close(fig)
        made += [f"{run.name}_relfit_box.svg", f"{run.name}_relfit_ma.svg"]

        grid_csv = run / "archive_grid.csv"
        if grid_csv.exists():
            fig, ax = plt.subplots(figsize=(4, 4))
            plot_heatmap(ax, _read_table(grid_csv))
            fig.tight_layout()
            _save_svg(fig, out / f"{run.name}_archive.svg", run_header)
            plt.close(fig)
            made.append(f"{run.name}_archive.svg")
    print(f"wrote {len(made)} plots to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- compare

def cmd_compare(args) -> int:
    from .analytics import compare_runs, format_verdicts, run_summaries
    from .errors import CorruptLog

    if len(args.a) < 2 or len(args.b) < 2:
        return _fail("each group needs at least 2 run directories", EXIT_CONFIG)
    try:
        summaries = run_summaries(list(args.a) + list(args.b))
    except (CorruptLog, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_DATA)
    verdicts = compare_runs(summaries[:len(args.a)], summaries[len(args.a):], args.alpha)
    table = format_verdicts(verdicts, f"qdvox {__version__} compare A={len(args.a)} B={len(args.b)} "
                                      f"alpha={args.alpha} (*: p<alpha, n.s.: p>=alpha)")
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


# -------------------------------------------------------------- champion-dump

def cmd_champion_dump(args) -> int:
    from .analytics import final_checkpoint
    from .archive import load_archive
    from .config import RunConfig
    from .errors import ConfigError
    from .evolve import seed_for
    from .morphology import decode
    from .sim import rollout, write_trajectory_csv

    run = Path(args.run_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else final_checkpoint(run)
    if ckpt is None or not (ckpt / "archive" / "index.json").exists():
        return _fail(f"no checkpoint found under {run}", EXIT_DATA)
    try:
        cfg = RunConfig.load(run / "config.json")
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    champ = load_archive(ckpt / "archive").best()
    if champ is None:
        return _fail(f"{ckpt} holds an empty archive", EXIT_DATA)
    out = Path(args.out) if args.out else run / "champion"
    out.mkdir(parents=True, exist_ok=True)
    m = decode(champ.genome, *cfg.box)
    res = rollout(m, champ.params, seed_for(cfg.treatment.master_seed, 99, champ.id), cfg.task,
                  cfg.noise.obs_sigma, cfg.noise.act_sigma)
    header = f"{cfg.header()} champion={champ.id} cell={list(champ.cell)} archive_fitness={champ.fitness!r}"
    write_trajectory_csv(out / "trajectory.csv", res.trajectory[:res.steps + 1], header)
    (out / "morphology.txt").write_text(f"# {header}\n{m.to_text().rstrip()}\n")
    (out / "champion.json").write_text(json.dumps({
        "id": champ.id, "cell": list(champ.cell), "fitness": champ.fitness,
        "replay_fitness": res.fitness, "status": res.status, "steps": res.steps,
        "descriptor": list(m.descriptor), "header": header}, indent=1, sort_keys=True) + "\n")
    print(f"champion {champ.id} (fitness {champ.fitness:.4f}) written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdvox", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qdvox {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one treatment")
    p.add_argument("config", nargs="?", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--treatment", choices=("standard", "no_migration", "pollination"))
    p.add_argument("--generations", type=int)
    p.add_argument("--no-migration-after", type=int)
    p.add_argument("--out")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.add_argument("--workers", type=int, help=f"evaluation processes (default {_default_workers()})")
    p.add_argument("--checkpoint-interval", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", parents=[common], help="write analysis CSVs for run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="analysis")
    p.add_argument("--window", type=int, default=500, help="migration window in generations")
    p.add_argument("--ma-window", type=int, default=100, help="moving-average window")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", parents=[common], help="render SVG plots from an analysis directory")
    p.add_argument("analysis_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", parents=[common], help="rank-sum comparison of two groups of runs")
    p.add_argument("--a", nargs="+", required=True, metavar="RUN")
    p.add_argument("--b", nargs="+", required=True, metavar="RUN")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("champion-dump", parents=[common], help="trajectory and morphology of the run champion")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_champion_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
