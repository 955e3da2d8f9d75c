import struct

import numpy as np
import pytest

from paraid import bench_cli
from paraid.bench_cli import (
    FOM_COLUMNS,
    TR_COLUMNS,
    RunConfig,
    compare,
    main,
    problem_hash,
    read_history,
    read_manifest,
    sweep_grid,
    write_manifest,
)
from paraid.errors import ConfigError, SolverError, StagnationError
from paraid.fieldio import MAGIC, read_field, read_sidecar, write_field


def test_field_roundtrip(tmp_path, rng):
    q = rng.standard_normal((7, 3))
    path = write_field(tmp_path / "q.bin", q, {"run": 1})
    raw = path.read_bytes()
    assert raw[:12] == MAGIC and struct.unpack("<I", raw[12:16]) == (1,)
    assert struct.unpack("<QQ", raw[16:32]) == (7, 3)
    assert np.array_equal(np.frombuffer(raw[32:], "<f8").reshape(7, 3), q)
    back = read_field(path)
    assert np.array_equal(back, q)
    write_field(tmp_path / "r.bin", back, {"run": 1})
    assert (tmp_path / "r.bin").read_bytes() == raw
    assert (tmp_path / "r.txt").read_text() == (tmp_path / "q.txt").read_text()
    assert read_sidecar(path)["rows"] == "7"
    assert read_field(write_field(tmp_path / "v.bin", np.arange(4.0))).shape == (4, 1)


def test_field_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense" * 8)
    with pytest.raises(ValueError):
        read_field(bad)
    path = write_field(tmp_path / "q.bin", np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_field(path)
    with pytest.raises(ValueError):
        write_field(tmp_path / "c.bin", np.ones((2, 2, 2)))


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = RunConfig()
    assert (cfg.cells, cfg.K, cfg.delta) == (300, 50, 1e-5)
    cfg = RunConfig(run_id=3, cells=12, K=7, algo="tr", eps_pod=1e-10, output=str(tmp_path),
                    overrides={"tr.eta0": "0.2", "pgd.tolerance": 1e-10, "tr.max_inner": "7"})
    path = write_manifest(tmp_path / "m.txt", cfg.to_items())
    back = RunConfig.from_items(read_manifest(path))
    assert back == cfg
    assert back.settings().eta0 == 0.2 and back.settings().pgd.tolerance == 1e-10
    fom = RunConfig(algo="fom", cells=5, K=3, overrides={"irgnm.theta": 0.3})
    assert RunConfig.from_items(read_manifest(write_manifest(tmp_path / "f.txt", fom.to_items()))) == fom


def test_config_errors(tmp_path):
    for kwargs in ({"run_id": 9}, {"algo": "x"}, {"delta": 0.0}, {"eps_pod": -1.0}, {"cells": 0},
                   {"overrides": {"tr.nope": 1}}, {"overrides": {"tr.beta1": 2.0}},
                   {"overrides": {"tr.max_inner": "many"}}):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs)
    items = RunConfig(cells=5, K=3).to_items()
    items["problem.cells"] = 6
    with pytest.raises(ConfigError, match="hash"):
        RunConfig.from_items({k: str(v) for k, v in items.items()})
    (tmp_path / "junk.txt").write_text("no equals sign\n")
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "junk.txt")


def test_problem_hash():
    assert problem_hash(1, 30, 25, 1e-5, 0) == problem_hash(1, 30, 25, 1e-5, 0)
    assert problem_hash(1, 30, 25, 1e-5, 0) != problem_hash(1, 30, 25, 1e-5, 1)


def test_sweep_grid():
    grid = sweep_grid()
    assert len(grid) == 6
    assert grid[0] == pytest.approx(1e-9) and grid[-1] == pytest.approx(1e-14)
    assert np.allclose(np.diff(np.log10(grid)), -1.0)


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    args = ["--run", "1", "--cells", "6", "--K", "5", "--delta", "1e-4"]
    assert main(["run", *args, "--algo", "fom", "--out", str(root / "fom")]) == 0
    assert main(["run", *args, "--algo", "tr", "--out", str(root / "tr")]) == 0
    assert main(["run", "--run", "1", "--cells", "5", "--K", "5", "--delta", "1e-4", "--out",
                 str(root / "other")]) == 0
    return root


def test_run_artifacts(small_runs):
    for name, cols in (("fom", FOM_COLUMNS), ("tr", TR_COLUMNS)):
        d = small_runs / name
        for f in ("manifest.txt", "history.csv", "q_final.bin", "q_final.txt"):
            assert (d / f).exists()
        rows = read_history(d / "history.csv")
        assert tuple(rows[0].keys()) == cols
        m = read_manifest(d)
        assert m["results.converged"] == "true"
        assert m["problem.hash"] == problem_hash(1, 6, 5, 1e-4, 0)
        cfg = RunConfig.from_items(m)
        assert cfg.to_items() == RunConfig.from_items(read_manifest(d)).to_items()
        assert read_field(d / "q_final.bin").shape == (49, 1)
    assert (small_runs / "tr" / "decisions.csv").exists()


def test_rerun_from_manifest_is_identical(small_runs, tmp_path):
    assert main(["run", "--config", str(small_runs / "tr" / "manifest.txt"), "--out", str(tmp_path / "again")]) == 0

    def strip(path):
        rows = read_history(path)
        return [{k: v for k, v in r.items() if k not in bench_cli.TIME_COLUMNS} for r in rows]

    assert strip(tmp_path / "again" / "history.csv") == strip(small_runs / "tr" / "history.csv")


def test_compare(small_runs, tmp_path, capsys):
    row = compare(small_runs / "tr", small_runs / "tr")
    assert row["l2_rel_err"] == 0 and row["h1_rel_err"] == 0 and row["speedup"] == 1
    row = compare(small_runs / "fom", small_runs / "tr")
    assert set(row) == set(bench_cli.COMPARE_COLUMNS)
    assert 0 < row["l2_rel_err"] < 1 and row["n_Q"] != "-"
    assert main(["compare", str(small_runs / "fom"), str(small_runs / "tr"), "--out", str(tmp_path / "c.csv")]) == 0
    assert "speedup" in capsys.readouterr().out
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(bench_cli.COMPARE_COLUMNS)
    with pytest.raises(ConfigError):
        compare(small_runs / "fom", small_runs / "other")
    assert main(["compare", str(small_runs / "fom"), str(small_runs / "other")]) == 2


def test_default_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv(bench_cli.OUTPUT_ENV, str(tmp_path))
    cfg = RunConfig(cells=4, K=3)
    assert cfg.output_dir.parent == tmp_path


@pytest.mark.parametrize("exc,code", [(SolverError("x"), 3), (StagnationError("x", {"eta": 1}), 4),
                                      (ConfigError("x"), 2)])
def test_exit_codes(monkeypatch, exc, code, tmp_path):
    def boom(cfg):
        raise exc

    monkeypatch.setattr(bench_cli, "execute", boom)
    assert main(["run", "--cells", "4", "--K", "3", "--out", str(tmp_path)]) == code


def test_bad_cli_arguments(tmp_path):
    assert main(["run", "--set", "tr.nope=1", "--out", str(tmp_path)]) == 2
    assert main(["run", "--set", "garbage", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["run", "--run", "7"])
    assert info.value.code == 2


def test_sweep(tmp_path):
    assert main(["sweep", "--run", "1", "--cells", "5", "--K", "4", "--delta", "1e-4", "--eps", "1e-9", "1e-12",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert len(lines) == 3
