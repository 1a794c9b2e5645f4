import json
import xml.etree.ElementTree as ET

import pytest

from conftest import tiny_config
from qdvox import cli
from qdvox.config import RunConfig

SVG = "{http://www.w3.org/2000/svg}"


def write_config(tmp_path, treatment="standard", seed=0, generations=6):
    cfg = tiny_config(tmp_path, treatment, generations=generations, seed=seed)
    path = tmp_path / f"{treatment}_{seed}.json"
    cfg.dump(path)
    return cfg, path


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    dirs = []
    for s in (0, 1):
        cfg, path = write_config(root, "pollination", seed=s)
        assert cli.main(["run", str(path), "--out", str(root / f"run{s}")]) == 0
        dirs.append(root / f"run{s}")
    analysis = root / "analysis"
    assert cli.main(["analyze", *map(str, dirs), "--out", str(analysis), "--window", "2", "--ma-window", "3"]) == 0
    return root, dirs, analysis


# ------------------------------------------------------------------- run

def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert cli.main(["run", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"treatment": {"speed": 3}}))
    assert cli.main(["run", str(tmp_path / "c.json")]) == 2


def test_invalid_override_exits_2(tmp_path):
    _, path = write_config(tmp_path, "no_migration")
    assert cli.main(["run", str(path), "--no-migration-after", "99"]) == 2


def test_flags_override_file(tmp_path):
    _, path = write_config(tmp_path)
    args = cli.build_parser().parse_args(["run", str(path), "--treatment", "no_migration",
                                          "--no-migration-after", "4", "--seed", "7", "--generations", "9",
                                          "--out", "o", "--workers", "3", "--checkpoint-interval", "2"])
    cfg = cli.build_config(args)
    t = cfg.treatment
    assert (t.treatment, t.no_migration_after, t.master_seed, t.generations) == ("no_migration", 4, 7, 9)
    assert (cfg.out_dir, cfg.workers, cfg.checkpoint_interval) == ("o", 3, 2)
    assert cfg.box == (3, 3)


def test_defaults_without_config_use_available_cores():
    cfg = cli.build_config(cli.build_parser().parse_args(["run"]))
    assert cfg.workers == cli._default_workers()
    assert cfg.hash() == RunConfig().hash()


def test_resume_continues_identically(tmp_path, cli_runs):
    root, dirs, _ = cli_runs
    reference = (dirs[0] / "events.jsonl").read_bytes()
    ckpt = dirs[0] / "checkpoints" / "gen_3"
    assert cli.main(["run", "--resume", str(ckpt), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "events.jsonl").read_bytes() == reference


def test_resume_mismatch_exits_3(tmp_path, cli_runs):
    root, dirs, _ = cli_runs
    ckpt = dirs[0] / "checkpoints" / "gen_3"
    assert cli.main(["run", "--resume", str(ckpt), "--seed", "5", "--out", str(tmp_path / "x")]) == 3
    assert cli.main(["run", "--resume", str(tmp_path / "nothing")]) == 3


def test_run_outputs_carry_config_hash(cli_runs):
    root, dirs, _ = cli_runs
    cfg = RunConfig.load(dirs[0] / "config.json")
    assert (dirs[0] / "metrics.csv").read_text().startswith(f"# {cfg.header()}\n")
    head = json.loads((dirs[0] / "events.jsonl").read_text().splitlines()[0])
    assert head["config_hash"] == cfg.hash() and head["tool"] == cfg.header()


# --------------------------------------------------------------- analyze

def test_analyze_writes_figure_csvs(cli_runs):
    root, dirs, analysis = cli_runs
    for name in ("fig1_migrations.csv", "fig4_relfit.csv", "fig8_relfit_ma.csv"):
        lines = (analysis / "run0" / name).read_text().splitlines()
        assert lines[0].startswith("# qdvox 0.1.0 config=") and len(lines) > 2


def test_reanalysis_is_byte_identical(tmp_path, cli_runs):
    root, dirs, analysis = cli_runs
    assert cli.main(["analyze", *map(str, dirs), "--out", str(tmp_path), "--window", "2", "--ma-window", "3"]) == 0
    for p in analysis.rglob("*.csv"):
        assert p.read_bytes() == (tmp_path / p.relative_to(analysis)).read_bytes()


def test_truncated_log_exits_4_with_line(tmp_path, cli_runs, capsys):
    root, dirs, _ = cli_runs
    broken = tmp_path / "broken"
    broken.mkdir()
    lines = (dirs[0] / "events.jsonl").read_bytes().split(b"\n")
    (broken / "events.jsonl").write_bytes(b"\n".join(lines[:5]) + b"\n" + lines[5][: len(lines[5]) // 2])
    (broken / "metrics.csv").write_bytes((dirs[0] / "metrics.csv").read_bytes())
    assert cli.main(["analyze", str(broken), "--out", str(tmp_path / "a")]) == 4
    err = capsys.readouterr().err
    assert "line 6" in err and "5" in err


def test_analyze_missing_files_exits_4(tmp_path):
    assert cli.main(["analyze", str(tmp_path), "--out", str(tmp_path / "a")]) == 4


# ------------------------------------------------------------------ plot

def test_plot_svgs_are_well_formed_with_header(tmp_path, cli_runs):
    root, dirs, analysis = cli_runs
    assert cli.main(["plot", str(analysis), "--out", str(tmp_path)]) == 0
    svgs = sorted(tmp_path.glob("*.svg"))
    assert {p.name for p in svgs} >= {"qd_metrics.svg", "migrations.svg", "run0_archive.svg", "run0_relfit_box.svg"}
    for p in svgs:
        ET.parse(p)
        assert p.read_text().splitlines()[1].startswith("<!-- qdvox ")


def test_plot_is_idempotent(tmp_path, cli_runs):
    root, dirs, analysis = cli_runs
    assert cli.main(["plot", str(analysis), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["plot", str(analysis), "--out", str(tmp_path / "b")]) == 0
    for p in (tmp_path / "a").glob("*.svg"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_heatmap_has_one_rectangle_per_cell(tmp_path, cli_runs):
    root, dirs, analysis = cli_runs
    cli.main(["plot", str(analysis), "--out", str(tmp_path)])
    tree = ET.parse(tmp_path / "run0_archive.svg")
    gids = [g.get("id") for g in tree.iter(f"{SVG}g") if (g.get("id") or "").startswith("cell-")]
    assert sorted(gids) == sorted(f"cell-{i}-{j}" for i in range(3) for j in range(3))


def test_empty_series_plot_says_no_data(tmp_path):
    head = "# qdvox 0.1.0 config=abc\n"
    (tmp_path / "aggregate_metrics.csv").write_text(head + "metric,generation,mean,band_lo,band_hi\n")
    (tmp_path / "aggregate_migrations.csv").write_text(head + "window_end,mean,band_lo,band_hi\n")
    assert cli.main(["plot", str(tmp_path)]) == 0
    text = (tmp_path / "plots" / "migrations.svg").read_text()
    ET.fromstring(text.split("\n", 1)[1])
    assert "no data" in text


def test_plot_missing_csvs_exits_4(tmp_path):
    assert cli.main(["plot", str(tmp_path)]) == 4


# --------------------------------------------------------------- compare

def test_compare_prints_table(tmp_path, cli_runs, capsys):
    root, dirs, _ = cli_runs
    out = tmp_path / "cmp.txt"
    args = ["compare", "--a", str(dirs[0]), str(dirs[1]), "--b", str(dirs[1]), str(dirs[0]), "--out", str(out)]
    assert cli.main(args) == 0
    table = capsys.readouterr().out
    rows = [ln for ln in table.splitlines() if ln and not ln.startswith(("#", "metric"))]
    assert [r.split()[0] for r in rows] == ["collection_size", "total_quality", "maximal_quality", "reliability"]
    assert all(r.split()[-1] == "n.s." for r in rows)
    assert all(len(r.split()[-2].split(".")[1]) == 4 for r in rows)
    assert out.read_text() == table and table.startswith("# qdvox 0.1.0 ")


def test_compare_needs_two_runs_per_group(cli_runs):
    root, dirs, _ = cli_runs
    assert cli.main(["compare", "--a", str(dirs[0]), "--b", str(dirs[0]), str(dirs[1])]) == 2


# ---------------------------------------------------------- champion-dump

def test_champion_dump(tmp_path, cli_runs):
    root, dirs, _ = cli_runs
    assert cli.main(["champion-dump", str(dirs[0]), "--out", str(tmp_path)]) == 0
    info = json.loads((tmp_path / "champion.json").read_text())
    grid = (tmp_path / "morphology.txt").read_text().splitlines()
    assert grid[0].startswith("# qdvox 0.1.0 config=") and len(grid) == 1 + 3
    traj = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert traj[0].startswith("# qdvox") and len(traj) > 3
    assert info["status"] in ("ok", "goal", "blowup") and info["fitness"] > 0


def test_champion_dump_without_checkpoint_exits_4(tmp_path):
    assert cli.main(["champion-dump", str(tmp_path)]) == 4
